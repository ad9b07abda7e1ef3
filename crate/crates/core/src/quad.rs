//! Gauss-Legendre quadrature on finite intervals.

use std::sync::OnceLock;

/// Nodes and weights of an `n`-point Gauss-Legendre rule on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            // Chebyshev initial guess, then Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // map [-1, 1] -> [0, 1]
            nodes[i] = 0.5 * (1.0 - x);
            nodes[n - 1 - i] = 0.5 * (1.0 + x);
            weights[i] = 0.5 * w;
            weights[n - 1 - i] = 0.5 * w;
        }
        Self { nodes, weights }
    }

    /// Shared 8-point rule.
    pub fn eight() -> &'static GaussLegendre {
        static RULE: OnceLock<GaussLegendre> = OnceLock::new();
        RULE.get_or_init(|| GaussLegendre::new(8))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integral of `f` over `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let h = b - a;
        if h == 0.0 {
            return 0.0;
        }
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(a + h * x)).sum::<f64>() * h
    }

    /// Composite rule over `panels` equal sub-intervals of `[a, b]`.
    pub fn composite<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, panels: usize, mut f: F) -> f64 {
        let panels = panels.max(1);
        let h = (b - a) / panels as f64;
        (0..panels)
            .map(|k| {
                let lo = a + h * k as f64;
                let hi = if k + 1 == panels { b } else { lo + h };
                self.integrate(lo, hi, &mut f)
            })
            .sum()
    }
}

/// P_n(x) and P_n'(x) by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// `∫_a^b f` over a sequence of breakpoints, 8-point rule with `panels` per piece.
pub fn integrate_pieces<F: FnMut(f64) -> f64>(breaks: &[f64], panels: usize, mut f: F) -> f64 {
    let rule = GaussLegendre::eight();
    breaks.windows(2).map(|w| rule.composite(w[0], w[1], panels, &mut f)).sum()
}

/// Integral over `[0, ∞)` of `e^{-rate t} g(t)` for smooth, bounded `g`.
///
/// Truncated where the weight falls below `1e-18`; the panels are laid out in
/// units of the decay length `1/rate`.
pub fn integrate_exp_weighted<F: FnMut(f64) -> f64>(rate: f64, mut g: F) -> f64 {
    assert!(rate > 0.0);
    let scale = 1.0 / rate;
    let end = 42.0 * scale;
    let rule = GaussLegendre::eight();
    // finer panels near the origin where g varies the most
    let mut breaks = vec![0.0];
    let mut x = (0.01 * scale).min(0.05);
    while x < end {
        breaks.push(x);
        x *= 1.6;
    }
    breaks.push(end);
    breaks.windows(2).map(|w| rule.integrate(w[0], w[1], |t| (-rate * t).exp() * g(t))).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        for n in [1, 2, 5, 8, 16] {
            let rule = GaussLegendre::new(n);
            let s: f64 = rule.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-14, "n={n} sum={s}");
        }
    }

    #[test]
    fn exact_for_degree_2n_minus_1() {
        let rule = GaussLegendre::new(8);
        // ∫_0^2 x^15 dx = 2^16/16
        let v = rule.integrate(0.0, 2.0, |x| x.powi(15));
        assert!((v - 4096.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn exp_weighted_matches_closed_form() {
        // ∫ e^{-2t} e^{-t} dt = 1/3
        let v = integrate_exp_weighted(2.0, |t| (-t).exp());
        assert!((v - 1.0 / 3.0).abs() < 1e-13, "{v}");
        let v = integrate_exp_weighted(0.5, |t| 1.0 / (1.0 + t * t));
        // reference from numeric integration at high resolution
        let reference = GaussLegendre::new(8).composite(0.0, 200.0, 20000, |t| (-0.5 * t).exp() / (1.0 + t * t));
        assert!((v - reference).abs() < 1e-12, "{v} vs {reference}");
    }
}
