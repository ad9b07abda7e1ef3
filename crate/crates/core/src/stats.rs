//! Distances, goodness-of-fit statistics and confidence intervals comparing
//! simulated stopped samples against analytic laws.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Normal, Poisson};

use crate::measure::RadialMeasure;
use crate::sim::StoppedSample;

pub const SCHEMA_VERSION: u32 = 1;

/// Asymptotic 5% Kolmogorov-Smirnov critical value `1.36 / sqrt(n)`.
pub fn ks_critical(n: usize) -> f64 {
    1.36 / (n as f64).sqrt()
}

/// `sup |F_n - F|` against a radial law.
///
/// Both distribution functions are right-continuous and `F_n` is constant
/// between samples, so the supremum is attained as a left or right limit at a
/// sample point, an atom or a density breakpoint.
pub fn ks_distance(samples: &[f64], law: &RadialMeasure) -> f64 {
    let sorted = sorted(samples);
    let n = sorted.len() as f64;
    let knots = law.knots();
    let mut points: Vec<f64> = sorted.clone();
    points.extend_from_slice(&knots.x);
    points.sort_by(f64::total_cmp);
    points.dedup();
    let mut sup: f64 = 0.0;
    for &x in &points {
        let below = sorted.partition_point(|&s| s < x) as f64 / n;
        let upto = sorted.partition_point(|&s| s <= x) as f64 / n;
        sup = sup.max((upto - law.cdf(x)).abs()).max((below - law.cdf_left(x)).abs());
    }
    sup
}

/// `sup |F_n - F|` against a continuous distribution function.
pub fn ks_continuous<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let sorted = sorted(samples);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// The empirical law of `samples` as a radial measure.
pub fn empirical_measure(samples: &[f64]) -> RadialMeasure {
    let sorted = sorted(samples);
    let n = sorted.len() as f64;
    let mut atoms: Vec<(f64, f64)> = Vec::new();
    for x in sorted {
        match atoms.last_mut() {
            Some(last) if last.0 == x => last.1 += 1.0,
            _ => atoms.push((x, 1.0)),
        }
    }
    for a in &mut atoms {
        a.1 /= n;
    }
    RadialMeasure::discrete(atoms).expect("empirical law of a non-empty sample")
}

/// `∫ |F_n - F| dr`, the 1-Wasserstein distance on the half-line.
pub fn wasserstein1(samples: &[f64], law: &RadialMeasure) -> f64 {
    wasserstein1_between(&empirical_measure(samples), law)
}

/// `∫ |F_a - F_b| dr` for two radial measures, exact: both distribution
/// functions are affine between the merged knots.
pub fn wasserstein1_between(a: &RadialMeasure, b: &RadialMeasure) -> f64 {
    let mut x = a.knots().x;
    x.extend(b.knots().x);
    x.sort_by(f64::total_cmp);
    x.dedup();
    let mut total = 0.0;
    for w in x.windows(2) {
        let h = w[1] - w[0];
        let d0 = a.cdf(w[0]) - b.cdf(w[0]);
        let d1 = a.cdf_left(w[1]) - b.cdf_left(w[1]);
        total += if d0 * d1 >= 0.0 {
            0.5 * h * (d0 + d1).abs()
        } else {
            0.5 * h * (d0 * d0 + d1 * d1) / (d0.abs() + d1.abs())
        };
    }
    total
}

/// A chi-square goodness-of-fit outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Chi2 {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

impl Chi2 {
    fn new(statistic: f64, dof: usize) -> Self {
        let p_value = if statistic.is_infinite() {
            0.0
        } else if dof == 0 {
            1.0
        } else {
            1.0 - ChiSquared::new(dof as f64).expect("positive dof").cdf(statistic)
        };
        Self { statistic, dof, p_value }
    }

    pub fn passes(&self, alpha: f64) -> bool {
        self.p_value >= alpha
    }
}

/// Pearson chi-square of category counts against a pmf. A count in a
/// zero-probability category makes the statistic infinite.
pub fn chi2_rays(counts: &[u64], pmf: &[f64]) -> Chi2 {
    assert_eq!(counts.len(), pmf.len());
    let n: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut cats = 0usize;
    for (&c, &p) in counts.iter().zip(pmf) {
        if p <= 0.0 {
            if c > 0 {
                stat = f64::INFINITY;
            }
            continue;
        }
        cats += 1;
        let e = n as f64 * p;
        stat += (c as f64 - e).powi(2) / e;
    }
    Chi2::new(stat, cats.saturating_sub(1))
}

/// Binned chi-square of counts against Poisson(`rate`); neighbouring bins are
/// merged until each expects at least five observations, the last bin being
/// the upper tail.
pub fn poisson_gof(counts: &[u32], rate: f64) -> Chi2 {
    let n = counts.len() as f64;
    if rate <= 0.0 {
        let stat = if counts.iter().all(|&c| c == 0) { 0.0 } else { f64::INFINITY };
        return Chi2::new(stat, 0);
    }
    let pois = Poisson::new(rate).expect("positive rate");
    let kmax = counts.iter().copied().max().unwrap_or(0) as u64;
    let mut observed = vec![0u64; kmax as usize + 1];
    for &c in counts {
        observed[c as usize] += 1;
    }
    // bins as [lo, hi) in k with the last bin open-ended
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    let mut k = 0u64;
    let mut cum = 0.0;
    loop {
        let p = pois.pmf(k);
        o += observed.get(k as usize).copied().unwrap_or(0) as f64;
        e += n * p;
        cum += p;
        k += 1;
        let rest = n * (1.0 - cum);
        if e >= 5.0 {
            bins.push((o, e));
            (o, e) = (0.0, 0.0);
        }
        if rest < 5.0 || (k > kmax && rest < 1e-9 * n) {
            break;
        }
    }
    let tail_o = observed.iter().skip(k as usize).sum::<u64>() as f64 + o;
    let tail_e = n * (1.0 - cum).max(0.0) + e;
    match bins.last_mut() {
        Some(last) if tail_e < 5.0 => {
            last.0 += tail_o;
            last.1 += tail_e;
        }
        _ => bins.push((tail_o, tail_e)),
    }
    let stat = bins
        .iter()
        .map(|&(o, e)| {
            if e > 0.0 {
                (o - e).powi(2) / e
            } else if o > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .sum();
    Chi2::new(stat, bins.len().saturating_sub(1))
}

/// Streaming count, sum and sum of squares.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Moments {
    pub n: u64,
    pub sum: f64,
    pub sumsq: f64,
}

impl Moments {
    pub fn from_slice(xs: &[f64]) -> Self {
        let mut m = Self::default();
        for &x in xs {
            m.push(x);
        }
        m
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sumsq += x * x;
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self { n: self.n + other.n, sum: self.sum + other.sum, sumsq: self.sumsq + other.sumsq }
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        ((self.sumsq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
    }

    pub fn std_err(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

/// Sample mean and the CLT half-width at confidence `level`.
pub fn mean_ci(samples: &[f64], level: f64) -> (f64, f64) {
    let m = Moments::from_slice(samples);
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    (m.mean(), z * m.std_err())
}

/// A convex cost applied to local times.
pub trait Cost {
    fn value(&self, x: f64) -> f64;
}

impl<F: Fn(f64) -> f64> Cost for F {
    fn value(&self, x: f64) -> f64 {
        self(x)
    }
}

/// Difference of mean costs between two independent sample sets of local
/// times, with the combined standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostComparison {
    pub mean_a: f64,
    pub mean_b: f64,
    pub diff: f64,
    pub std_err: f64,
}

pub fn compare_cost(local_a: &[f64], local_b: &[f64], cost: &dyn Cost) -> CostComparison {
    let a = Moments::from_slice(&local_a.iter().map(|&x| cost.value(x)).collect::<Vec<_>>());
    let b = Moments::from_slice(&local_b.iter().map(|&x| cost.value(x)).collect::<Vec<_>>());
    CostComparison {
        mean_a: a.mean(),
        mean_b: b.mean(),
        diff: a.mean() - b.mean(),
        std_err: (a.std_err().powi(2) + b.std_err().powi(2)).sqrt(),
    }
}

/// Aggregated stopped samples: ray counts, sorted per-ray radii and moments of `τ`,
/// `L_τ` and the cost of `L_τ`. Censored samples are counted separately.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalLaw {
    pub ray_counts: Vec<u64>,
    pub radii: Vec<Vec<f64>>,
    pub tau: Moments,
    pub local_time: Moments,
    pub cost: Moments,
    pub censored: u64,
}

impl EmpiricalLaw {
    pub fn new(n_rays: usize) -> Self {
        Self {
            ray_counts: vec![0; n_rays],
            radii: vec![Vec::new(); n_rays],
            tau: Moments::default(),
            local_time: Moments::default(),
            cost: Moments::default(),
            censored: 0,
        }
    }

    pub fn from_samples(samples: &[StoppedSample], n_rays: usize, cost: &dyn Cost) -> Self {
        let mut law = Self::new(n_rays);
        for s in samples {
            law.push_unsorted(s, cost);
        }
        for r in &mut law.radii {
            r.sort_by(f64::total_cmp);
        }
        law
    }

    fn push_unsorted(&mut self, s: &StoppedSample, cost: &dyn Cost) {
        if !s.stopped {
            self.censored += 1;
            return;
        }
        self.ray_counts[s.ray] += 1;
        self.radii[s.ray].push(s.radius);
        self.tau.push(s.tau);
        self.local_time.push(s.local_time);
        self.cost.push(cost.value(s.local_time));
    }

    /// Associative, commutative merge.
    pub fn merge(&self, other: &Self) -> Self {
        Self {
            ray_counts: self.ray_counts.iter().zip(&other.ray_counts).map(|(a, b)| a + b).collect(),
            radii: self
                .radii
                .iter()
                .zip(&other.radii)
                .map(|(a, b)| {
                    let mut v = a.clone();
                    v.extend_from_slice(b);
                    v.sort_by(f64::total_cmp);
                    v
                })
                .collect(),
            tau: self.tau.merge(&other.tau),
            local_time: self.local_time.merge(&other.local_time),
            cost: self.cost.merge(&other.cost),
            censored: self.censored + other.censored,
        }
    }

    pub fn n(&self) -> u64 {
        self.ray_counts.iter().sum()
    }
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// One line of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `statistic <= threshold`.
    pub fn at_most(name: impl Into<String>, statistic: f64, threshold: f64) -> Self {
        Self { name: name.into(), statistic, threshold, pass: statistic <= threshold }
    }

    /// Passes when `statistic >= threshold`.
    pub fn at_least(name: impl Into<String>, statistic: f64, threshold: f64) -> Self {
        Self { name: name.into(), statistic, threshold, pass: statistic >= threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub checks: Vec<Check>,
    pub values: serde_json::Map<String, serde_json::Value>,
}

impl Report {
    pub fn new(command: impl Into<String>) -> Self {
        Self { schema_version: SCHEMA_VERSION, command: command.into(), checks: Vec::new(), values: Default::default() }
    }

    pub fn value(&mut self, key: &str, v: impl Serialize) {
        self.values.insert(key.into(), serde_json::to_value(v).expect("serializable value"));
    }

    pub fn check(&mut self, c: Check) {
        self.checks.push(c);
    }

    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::function::erf::erf;

    #[test]
    fn ks_identical_discrete_law() {
        let law = RadialMeasure::discrete(vec![(1.0, 0.5), (3.0, 0.5)]).unwrap();
        let samples = [1.0, 3.0, 1.0, 3.0];
        assert!(ks_distance(&samples, &law) < 1e-15);
        let wrong = RadialMeasure::discrete(vec![(2.0, 1.0)]).unwrap();
        assert!((ks_distance(&samples, &wrong) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ks_density_uses_left_limits() {
        // F_n jumps to 1 at 0.5 while F(0.5) = 0.5
        let law = RadialMeasure::uniform(0.0, 1.0).unwrap();
        assert!((ks_distance(&[0.5], &law) - 0.5).abs() < 1e-15);
        // samples above the support: sup is reached just below them
        assert!((ks_distance(&[2.0], &law) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ks_half_normal_reference() {
        let samples: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0 * 3.0).collect();
        let d = ks_continuous(&samples, |x| erf(x / 2f64.sqrt()));
        assert!(d > 0.3 && d < 0.4, "{d}");
    }

    #[test]
    fn wasserstein_reference_values() {
        let d1 = RadialMeasure::point(1.0).unwrap();
        let d2 = RadialMeasure::point(2.0).unwrap();
        assert!((wasserstein1_between(&d1, &d2) - 1.0).abs() < 1e-15);
        assert_eq!(wasserstein1(&[1.0, 1.0], &d1), 0.0);
        // uniform[0,2] vs δ_1 = ∫|x-1|/2 = 1/2
        let u = RadialMeasure::uniform(0.0, 2.0).unwrap();
        assert!((wasserstein1_between(&u, &d1) - 0.5).abs() < 1e-15);
        // uniform[0,1] vs uniform[0.5,1.5]: shift = 0.5
        let a = RadialMeasure::uniform(0.0, 1.0).unwrap();
        let b = RadialMeasure::uniform(0.5, 1.5).unwrap();
        assert!((wasserstein1_between(&a, &b) - 0.5).abs() < 1e-15);
        // crossing CDFs: uniform[0,2] vs uniform[0.5,1.5] = ∫|F1-F2| = 0.25
        let c = RadialMeasure::uniform(0.5, 1.5).unwrap();
        assert!((wasserstein1_between(&u, &c) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn chi2_behaviour() {
        let ok = chi2_rays(&[500, 500], &[0.5, 0.5]);
        assert_eq!(ok.statistic, 0.0);
        assert_eq!(ok.dof, 1);
        assert!((ok.p_value - 1.0).abs() < 1e-12);
        let bad = chi2_rays(&[700, 300], &[0.5, 0.5]);
        assert!(bad.p_value < 1e-10);
        assert_eq!(chi2_rays(&[1, 2], &[1.0, 0.0]).statistic, f64::INFINITY);
    }

    #[test]
    fn poisson_gof_behaviour() {
        // exact expected frequencies for Poisson(2), n = 10000
        let pois = Poisson::new(2.0).unwrap();
        let mut counts = Vec::new();
        for k in 0..15u32 {
            let c = (10000.0 * pois.pmf(k as u64)).round() as usize;
            counts.extend(std::iter::repeat_n(k, c));
        }
        let g = poisson_gof(&counts, 2.0);
        assert!(g.p_value > 0.99, "{g:?}");
        assert!(g.dof >= 5);
        let shifted: Vec<u32> = counts.iter().map(|&c| c + 1).collect();
        assert!(poisson_gof(&shifted, 2.0).p_value < 1e-10);
        assert_eq!(poisson_gof(&[0, 0, 0], 0.0).statistic, 0.0);
    }

    #[test]
    fn mean_ci_of_constants() {
        let (m, h) = mean_ci(&[2.5; 10], 0.95);
        assert_eq!((m, h), (2.5, 0.0));
        let (_, h) = mean_ci(&[0.0, 1.0, 0.0, 1.0], 0.95);
        assert!((h - 1.959963984540054 * (1.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn compare_same_samples_is_zero() {
        let xs = [0.5, 1.0, 2.0, 3.5];
        let c = compare_cost(&xs, &xs, &|x: f64| x + (-x).exp());
        assert_eq!(c.diff, 0.0);
    }

    #[test]
    fn report_serializes_with_version() {
        let mut r = Report::new("validate");
        r.check(Check::at_most("w1", 0.01, 0.05));
        r.value("m", 2.0);
        let json = r.to_json();
        assert!(json.contains("\"schema_version\": 1"));
        assert!(r.pass());
    }

    fn sample(ray: usize, radius: f64, tau: f64) -> StoppedSample {
        StoppedSample { ray, radius, tau, local_time: tau / 2.0, stopped: true, peaks: vec![] }
    }

    proptest! {
        #[test]
        fn merge_matches_concatenation(
            a in prop::collection::vec((0usize..2, 0u32..50, 1u32..100), 1..40),
            b in prop::collection::vec((0usize..2, 0u32..50, 1u32..100), 1..40),
        ) {
            let cost = |x: f64| x + (-x).exp();
            let sa: Vec<_> = a.iter().map(|&(g, r, t)| sample(g, r as f64 / 10.0, t as f64 / 10.0)).collect();
            let sb: Vec<_> = b.iter().map(|&(g, r, t)| sample(g, r as f64 / 10.0, t as f64 / 10.0)).collect();
            let all: Vec<_> = sa.iter().chain(&sb).cloned().collect();
            let merged = EmpiricalLaw::from_samples(&sa, 2, &cost).merge(&EmpiricalLaw::from_samples(&sb, 2, &cost));
            let direct = EmpiricalLaw::from_samples(&all, 2, &cost);
            prop_assert_eq!(&merged.ray_counts, &direct.ray_counts);
            prop_assert_eq!(&merged.radii, &direct.radii);
            prop_assert!((merged.tau.mean() - direct.tau.mean()).abs() < 1e-12);
            prop_assert!((merged.cost.variance() - direct.cost.variance()).abs() < 1e-9);
            let law = RadialMeasure::discrete(vec![(1.0, 0.5), (3.0, 0.5)]).unwrap();
            for g in 0..2 {
                if !direct.radii[g].is_empty() {
                    prop_assert_eq!(ks_distance(&merged.radii[g], &law), ks_distance(&direct.radii[g], &law));
                }
            }
        }

        #[test]
        fn statistics_are_permutation_invariant(mut xs in prop::collection::vec(0u32..100, 2..50), seed in 0u64..1000) {
            let law = RadialMeasure::uniform(0.0, 5.0).unwrap();
            let v: Vec<f64> = xs.iter().map(|&x| x as f64 / 20.0).collect();
            let d = ks_distance(&v, &law);
            let w = wasserstein1(&v, &law);
            // deterministic shuffle
            let n = xs.len();
            for i in 0..n {
                let j = ((seed as usize).wrapping_mul(31).wrapping_add(i * 17)) % n;
                xs.swap(i, j);
            }
            let v2: Vec<f64> = xs.iter().map(|&x| x as f64 / 20.0).collect();
            prop_assert_eq!(d, ks_distance(&v2, &law));
            prop_assert_eq!(w, wasserstein1(&v2, &law));
        }
    }
}
