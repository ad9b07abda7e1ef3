//! Walsh Brownian motion on finitely many rays, simulated through the Lévy
//! identity, and execution of stopping rules on the simulated paths.
//!
//! A driving Brownian motion `W` is stepped with exact Gaussian increments and
//! its running maximum `M` is refined by sampling the maximum of the Brownian
//! bridge inside each step. The radius is `R = M - W` and the local time at the
//! origin is `L = M`; both are exact in law at the grid times. A new ray label
//! is drawn from the spinning measure in every step where `L` increased.
//!
//! Every path owns a ChaCha8 stream selected by `(seed, path index)`, so runs
//! are reproducible and independent of the number of worker threads.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measure::SpinningMeasure;

/// Bridge events with probability below `e^{-40}` are not sampled.
const MAX_EXPONENT: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    pub dt: f64,
    pub t_max: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub bridge_refinement: bool,
}

impl SimParams {
    pub fn new(dt: f64, t_max: f64, n_paths: usize, seed: u64) -> Self {
        Self { dt, t_max, n_paths, seed, bridge_refinement: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidParams(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.t_max > 0.0) || self.t_max.is_nan() {
            return Err(Error::InvalidParams(format!("t_max = {} must be positive", self.t_max)));
        }
        if self.n_paths == 0 {
            return Err(Error::InvalidParams("n_paths must be at least 1".into()));
        }
        Ok(())
    }
}

/// The RNG stream of one path.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Skeleton of one path. `ray[i]` indexes the spinning measure.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WalshPath {
    pub t: Vec<f64>,
    pub w: Vec<f64>,
    pub m: Vec<f64>,
    pub r: Vec<f64>,
    pub l: Vec<f64>,
    pub ray: Vec<usize>,
}

impl WalshPath {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn push(&mut self, t: f64, w: f64, m: f64, ray: usize) {
        self.t.push(t);
        self.w.push(w);
        self.m.push(m);
        self.r.push(m - w);
        self.l.push(m);
        self.ray.push(ray);
    }
}

/// Per-ray stopping levels evaluated at the current local time.
pub trait BarrierLevels: Send + Sync {
    /// Radius at which an excursion on `ray` started at local time `l` stops.
    /// May be infinite.
    fn level(&self, ray: usize, l: f64) -> f64;
}

/// Sequential interval exits on each ray.
///
/// `levels[0]` holds the single first-stage hitting level. From the point
/// `levels[k][j]` the next stage runs until the radius leaves
/// `[levels[k+1][2j], levels[k+1][2j+1]]`, moving to the child on the side
/// where it exits.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTree {
    pub levels: Vec<Vec<f64>>,
}

#[derive(Clone)]
pub enum StoppingRule {
    /// Stop at a deterministic time.
    FixedTime(f64),
    /// Stop on the first hit of radius `rho[ray]`.
    HitSurface(Vec<f64>),
    /// Stage-wise interval exits, one tree per ray.
    HitLevelSet(Vec<LevelTree>),
    /// Stop once `R >= level(Γ, L)`.
    Barrier(Arc<dyn BarrierLevels>),
}

impl fmt::Debug for StoppingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::FixedTime(t) => f.debug_tuple("FixedTime").field(t).finish(),
            Self::HitSurface(rho) => f.debug_tuple("HitSurface").field(rho).finish(),
            Self::HitLevelSet(trees) => f.debug_tuple("HitLevelSet").field(&trees.len()).finish(),
            Self::Barrier(_) => f.write_str("Barrier(..)"),
        }
    }
}

impl StoppingRule {
    fn validate(&self, kappa: &SpinningMeasure) -> Result<()> {
        let charged = |i: usize| kappa.probs()[i] > 0.0;
        match self {
            Self::FixedTime(t) => {
                if !(t.is_finite() && *t >= 0.0) {
                    return Err(Error::InvalidArgument(format!("fixed time {t} must be finite and >= 0")));
                }
            }
            Self::HitSurface(rho) => {
                if rho.len() != kappa.len() {
                    return Err(Error::InvalidArgument("one level per ray required".into()));
                }
                for (i, &r) in rho.iter().enumerate() {
                    if charged(i) && !(r.is_finite() && r > 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "level {r} on ray `{}` must be positive and finite",
                            kappa.ids()[i]
                        )));
                    }
                }
            }
            Self::HitLevelSet(trees) => {
                if trees.len() != kappa.len() {
                    return Err(Error::InvalidArgument("one level tree per ray required".into()));
                }
                for (i, tree) in trees.iter().enumerate() {
                    if !charged(i) {
                        continue;
                    }
                    let first = tree.levels.first().and_then(|l| l.first()).copied().unwrap_or(0.0);
                    if !(first.is_finite() && first > 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "first level on ray `{}` must be positive and finite",
                            kappa.ids()[i]
                        )));
                    }
                    for (k, lv) in tree.levels.iter().enumerate() {
                        if lv.len() != 1 << k || lv.iter().any(|x| !x.is_finite() || *x < 0.0) {
                            return Err(Error::InvalidArgument(format!(
                                "malformed level {k} on ray `{}`",
                                kappa.ids()[i]
                            )));
                        }
                    }
                }
            }
            Self::Barrier(_) => {}
        }
        Ok(())
    }
}

/// Outcome of running a rule on one path. `ray` indexes the spinning measure.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppedSample {
    pub ray: usize,
    pub radius: f64,
    pub tau: f64,
    pub local_time: f64,
    pub stopped: bool,
    /// Largest skeleton radius seen on each ray strictly before the stop.
    pub peaks: Vec<f64>,
}

struct RaySampler {
    index: WeightedIndex<f64>,
}

impl RaySampler {
    fn new(kappa: &SpinningMeasure) -> Result<Self> {
        WeightedIndex::new(kappa.probs().iter().copied())
            .map(|index| Self { index })
            .map_err(|e| Error::InvalidSpinning(e.to_string()))
    }
}

/// `(w0 + w1 + sqrt((w1 - w0)^2 - 2 dt ln u)) / 2`, the bridge maximum at
/// uniform level `u ∈ (0, 1]`.
fn bridge_max(w0: f64, w1: f64, dt: f64, u: f64) -> f64 {
    let d = w1 - w0;
    0.5 * (w0 + w1 + (d * d - 2.0 * dt * u.ln()).sqrt())
}

/// `P[sup of the bridge from w0 to w1 over dt exceeds c]` for `c >= max(w0, w1)`.
fn exceed_prob(w0: f64, w1: f64, c: f64, dt: f64) -> f64 {
    let e = 2.0 * (c - w0) * (c - w1) / dt;
    if e > MAX_EXPONENT {
        0.0
    } else {
        (-e).exp()
    }
}

/// A uniform on `(0, 1]`.
fn unit(rng: &mut ChaCha8Rng) -> f64 {
    1.0 - rng.random::<f64>()
}

/// The state of one path.
struct Walker<'a> {
    rng: ChaCha8Rng,
    rays: &'a RaySampler,
    bridge: bool,
    t: f64,
    w: f64,
    m: f64,
    ray: usize,
    // values at the start of the last step
    w_prev: f64,
    dt_last: f64,
}

impl<'a> Walker<'a> {
    fn new(rays: &'a RaySampler, params: &SimParams, path: u64) -> Self {
        let mut rng = path_rng(params.seed, path);
        let ray = rays.index.sample(&mut rng);
        Self { rng, rays, bridge: params.bridge_refinement, t: 0.0, w: 0.0, m: 0.0, ray, w_prev: 0.0, dt_last: 0.0 }
    }

    fn radius(&self) -> f64 {
        self.m - self.w
    }

    /// Advances by `dt`; returns whether the local time increased.
    fn step(&mut self, dt: f64, sqdt: f64) -> bool {
        let z: f64 = self.rng.sample(StandardNormal);
        let w0 = self.w;
        let w1 = w0 + sqdt * z;
        let mut m = self.m;
        if self.bridge {
            if w0.max(w1) >= m {
                let u = unit(&mut self.rng);
                m = m.max(bridge_max(w0, w1, dt, u));
            } else {
                let p = exceed_prob(w0, w1, m, dt);
                if p > 0.0 {
                    let u = unit(&mut self.rng);
                    if u <= p {
                        m = m.max(bridge_max(w0, w1, dt, u));
                    }
                }
            }
        } else if w1 > m {
            m = w1;
        }
        let increased = m > self.m;
        self.w_prev = w0;
        self.dt_last = dt;
        self.w = w1;
        self.m = m;
        self.t += dt;
        if increased {
            self.ray = self.rays.index.sample(&mut self.rng);
        }
        increased
    }

    /// Whether the radius reached `h` during the last step, which did not
    /// increase the local time. The skeleton is checked first, then the bridge.
    fn crossed_up(&mut self, h: f64) -> bool {
        let c = self.m - h;
        if self.w <= c {
            return true;
        }
        if !self.bridge || self.w_prev <= c {
            return false;
        }
        let e = 2.0 * (self.w_prev - c) * (self.w - c) / self.dt_last;
        e <= MAX_EXPONENT && unit(&mut self.rng) <= (-e).exp()
    }

    /// Whether the radius fell to `lo > 0` during the last step, which did not
    /// increase the local time. Uses the bridge law conditioned on the maximum
    /// staying below `M`.
    fn crossed_down(&mut self, lo: f64) -> bool {
        let c = self.m - lo;
        if self.w >= c {
            return true;
        }
        if !self.bridge || self.w_prev >= c {
            return false;
        }
        let dt = self.dt_last;
        let pc = exceed_prob(self.w_prev, self.w, c, dt);
        if pc == 0.0 {
            return false;
        }
        let pm = exceed_prob(self.w_prev, self.w, self.m, dt);
        unit(&mut self.rng) <= (pc - pm) / (1.0 - pm)
    }

    /// Moves the path to the radius `r` without changing the local time.
    fn place(&mut self, r: f64) {
        self.w = self.m - r;
    }
}

/// Simulates one path on `[0, t_max]` (the last step may be shorter).
pub fn simulate_path(kappa: &SpinningMeasure, params: &SimParams, path: u64) -> Result<WalshPath> {
    params.validate()?;
    let rays = RaySampler::new(kappa)?;
    let mut walker = Walker::new(&rays, params, path);
    let mut out = WalshPath::default();
    out.push(0.0, 0.0, 0.0, walker.ray);
    let n = (params.t_max / params.dt).ceil() as u64;
    let sq = params.dt.sqrt();
    for i in 0..n {
        let t_next = ((i + 1) as f64 * params.dt).min(params.t_max);
        let h = t_next - walker.t;
        if h <= 0.0 {
            break;
        }
        if h == params.dt {
            walker.step(h, sq);
        } else {
            walker.step(h, h.sqrt());
        }
        walker.t = t_next;
        out.push(walker.t, walker.w, walker.m, walker.ray);
    }
    Ok(out)
}

/// Records skeleton points when tracing.
struct Tracer<'p> {
    path: Option<&'p mut WalshPath>,
}

impl Tracer<'_> {
    fn record(&mut self, w: &Walker) {
        if let Some(p) = self.path.as_deref_mut() {
            p.push(w.t, w.w, w.m, w.ray);
        }
    }
}

struct Run<'a, 'p> {
    walker: Walker<'a>,
    params: &'a SimParams,
    sq: f64,
    peaks: Vec<f64>,
    tracer: Tracer<'p>,
}

enum Exit {
    Up,
    Down,
}

impl<'a> Run<'a, '_> {
    fn horizon(&self) -> bool {
        self.walker.t >= self.params.t_max
    }

    fn step(&mut self) -> bool {
        let inc = self.walker.step(self.params.dt, self.sq);
        self.tracer.record(&self.walker);
        inc
    }

    fn note_peak(&mut self) {
        let r = self.walker.radius();
        let p = &mut self.peaks[self.walker.ray];
        if r > *p {
            *p = r;
        }
    }

    fn finish(self, radius: f64, stopped: bool) -> StoppedSample {
        StoppedSample {
            ray: self.walker.ray,
            radius,
            tau: self.walker.t,
            local_time: self.walker.m,
            stopped,
            peaks: self.peaks,
        }
    }

    fn censored(self) -> StoppedSample {
        let r = self.walker.radius();
        self.finish(r, false)
    }

    /// Runs until the radius on the current ray leaves `(lo, hi)`. With
    /// `lo = 0` only a return to the origin exits downwards. Returns `None` at
    /// the horizon.
    fn exit_interval(&mut self, lo: f64, hi: f64) -> Option<Exit> {
        loop {
            if self.horizon() {
                return None;
            }
            if self.step() {
                return Some(Exit::Down);
            }
            if lo > 0.0 && self.walker.crossed_down(lo) {
                return Some(Exit::Down);
            }
            if self.walker.crossed_up(hi) {
                return Some(Exit::Up);
            }
            self.note_peak();
        }
    }

    /// Runs until the radius reaches `level(ray, L)`; the level is re-read at
    /// each new excursion. Returns the level reached, or `None` at the horizon.
    fn hit<F: FnMut(usize, f64) -> f64>(&mut self, mut level: F) -> Option<f64> {
        let mut h = level(self.walker.ray, self.walker.m);
        loop {
            if self.horizon() {
                return None;
            }
            if self.step() {
                h = level(self.walker.ray, self.walker.m);
                if self.walker.radius() >= h {
                    return Some(h);
                }
            } else if self.walker.crossed_up(h) {
                return Some(h);
            }
            self.note_peak();
        }
    }
}

fn run_path(
    rule: &StoppingRule,
    rays: &RaySampler,
    n_rays: usize,
    params: &SimParams,
    path: u64,
    trace: Option<&mut WalshPath>,
) -> StoppedSample {
    let walker = Walker::new(rays, params, path);
    let mut tracer = Tracer { path: trace };
    tracer.record(&walker);
    let mut run = Run { walker, params, sq: params.dt.sqrt(), peaks: vec![0.0; n_rays], tracer };
    match rule {
        StoppingRule::FixedTime(t) => {
            let target = t.min(params.t_max);
            while run.walker.t < target {
                let h = target - run.walker.t;
                if h >= params.dt {
                    run.step();
                } else {
                    run.walker.step(h, h.sqrt());
                    run.walker.t = target;
                    run.tracer.record(&run.walker);
                }
                if run.walker.t < target {
                    run.note_peak();
                }
            }
            let stopped = *t <= params.t_max;
            let r = run.walker.radius();
            run.finish(r, stopped)
        }
        StoppingRule::HitSurface(rho) => match run.hit(|ray, _| rho[ray]) {
            Some(h) => run.finish(h, true),
            None => run.censored(),
        },
        StoppingRule::Barrier(barrier) => match run.hit(|ray, l| barrier.level(ray, l)) {
            Some(h) => {
                run.walker.place(h);
                run.finish(h, true)
            }
            None => run.censored(),
        },
        StoppingRule::HitLevelSet(trees) => {
            let Some(first) = run.hit(|ray, _| trees[ray].levels[0][0]) else {
                return run.censored();
            };
            run.walker.place(first);
            let tree = &trees[run.walker.ray];
            let mut r = first;
            let mut j = 0usize;
            for k in 1..tree.levels.len() {
                let lo = tree.levels[k][2 * j];
                let hi = tree.levels[k][2 * j + 1];
                let exit = if r <= lo {
                    Exit::Down
                } else if r >= hi {
                    Exit::Up
                } else {
                    match run.exit_interval(lo, hi) {
                        Some(e) => e,
                        None => return run.censored(),
                    }
                };
                (r, j) = match exit {
                    Exit::Down => (lo, 2 * j),
                    Exit::Up => (hi, 2 * j + 1),
                };
                if r == 0.0 {
                    // absorbed at the origin
                    run.walker.place(0.0);
                    break;
                }
                run.walker.place(r);
            }
            run.finish(r, true)
        }
    }
}

/// Runs `rule` on path `path`.
pub fn run_one(rule: &StoppingRule, kappa: &SpinningMeasure, params: &SimParams, path: u64) -> Result<StoppedSample> {
    params.validate()?;
    rule.validate(kappa)?;
    let rays = RaySampler::new(kappa)?;
    Ok(run_path(rule, &rays, kappa.len(), params, path, None))
}

/// Runs `rule` on path `path` and returns the skeleton up to the stop.
pub fn trace_until(
    rule: &StoppingRule,
    kappa: &SpinningMeasure,
    params: &SimParams,
    path: u64,
) -> Result<(WalshPath, StoppedSample)> {
    params.validate()?;
    rule.validate(kappa)?;
    let rays = RaySampler::new(kappa)?;
    let mut trace = WalshPath::default();
    let sample = run_path(rule, &rays, kappa.len(), params, path, Some(&mut trace));
    Ok((trace, sample))
}

/// Runs `rule` on paths `0..n_paths`, in parallel on the current rayon pool.
/// The output is in path order and does not depend on the number of threads.
pub fn run_until(rule: &StoppingRule, kappa: &SpinningMeasure, params: &SimParams) -> Result<Vec<StoppedSample>> {
    params.validate()?;
    rule.validate(kappa)?;
    let rays = RaySampler::new(kappa)?;
    let n = kappa.len();
    Ok((0..params.n_paths as u64).into_par_iter().map(|i| run_path(rule, &rays, n, params, i, None)).collect())
}

/// Exit law of the first hit of the surface `rho`: ray probabilities
/// proportional to `κ/ρ` and `E[τ] = Σ ρκ / Σ κ/ρ`.
pub fn surface_hit_law(kappa: &SpinningMeasure, rho: &[f64]) -> Result<(Vec<f64>, f64)> {
    if rho.len() != kappa.len() {
        return Err(Error::InvalidArgument("one level per ray required".into()));
    }
    let mut inv = 0.0;
    let mut lin = 0.0;
    for (i, (&k, &r)) in kappa.probs().iter().zip(rho).enumerate() {
        if k == 0.0 {
            continue;
        }
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::InvalidArgument(format!("level {r} on ray `{}` must be positive", kappa.ids()[i])));
        }
        inv += k / r;
        lin += k * r;
    }
    let pmf = kappa.probs().iter().zip(rho).map(|(&k, &r)| if k == 0.0 { 0.0 } else { k / r / inv }).collect();
    Ok((pmf, lin / inv))
}

/// Excursions on a skeleton begun before local time `l` whose largest
/// skeleton radius reaches `x`. Excursion boundaries are the steps where the
/// local time increased.
pub fn excursion_counts(path: &WalshPath, x: f64, l: f64) -> u32 {
    let mut count = 0;
    let mut counted = false;
    for i in 1..path.len() {
        if path.l[i] > path.l[i - 1] {
            if path.l[i - 1] >= l {
                break;
            }
            counted = false;
        }
        if !counted && path.l[i] < l && path.r[i] >= x {
            count += 1;
            counted = true;
        }
    }
    count
}

/// Per-path excursion counts for a whole run, plus the number of paths that
/// reached the horizon before local time `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Census {
    pub counts: Vec<u32>,
    pub censored: usize,
}

/// Counts excursions with height at least `x` started before local time `l`.
///
/// The time to accumulate local time `l` has infinite mean, so an excursion
/// is abandoned as soon as it is counted: the radius jumps back to zero with
/// the local time unchanged. Only the remainder of a counted excursion is
/// skipped, which cannot change any count. Skipped time is not charged
/// against `t_max`.
pub fn excursion_census(params: &SimParams, x: f64, l: f64) -> Result<Census> {
    params.validate()?;
    if !(x > 0.0) || !(l >= 0.0) {
        return Err(Error::InvalidArgument(format!("need x > 0 and l >= 0, got x = {x}, l = {l}")));
    }
    let kappa = SpinningMeasure::new([("ray", 1.0)])?;
    let rays = RaySampler::new(&kappa)?;
    let results: Vec<(u32, bool)> = (0..params.n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut w = Walker::new(&rays, params, i);
            let sq = params.dt.sqrt();
            let mut count = 0;
            while w.m < l {
                if w.t >= params.t_max {
                    return (count, true);
                }
                let inc = w.step(params.dt, sq);
                let hit = if inc { w.radius() >= x } else { w.crossed_up(x) };
                // a new excursion that began at or after l is not counted
                if hit && w.m < l {
                    count += 1;
                    w.place(0.0);
                }
            }
            (count, false)
        })
        .collect();
    Ok(Census { censored: results.iter().filter(|r| r.1).count(), counts: results.into_iter().map(|r| r.0).collect() })
}

/// `h_{A,Aᶜ}(Z_t) = (κ(A) 1_{Aᶜ}(Γ) - κ(Aᶜ) 1_A(Γ)) R` along a path.
pub fn h_linear(path: &WalshPath, in_a: &[bool], kappa: &SpinningMeasure) -> Result<Vec<f64>> {
    let ka = h_weight(in_a, kappa)?;
    Ok(path.ray.iter().zip(&path.r).map(|(&g, &r)| h_value(in_a, ka, g, r)).collect())
}

/// `κ(A)`, checked to lie strictly between 0 and 1.
pub fn h_weight(in_a: &[bool], kappa: &SpinningMeasure) -> Result<f64> {
    if in_a.len() != kappa.len() {
        return Err(Error::InvalidArgument("ray subset must have one flag per ray".into()));
    }
    let ka: f64 = kappa.probs().iter().zip(in_a).filter(|p| *p.1).map(|p| p.0).sum();
    if !(ka > 0.0 && ka < 1.0) {
        return Err(Error::InvalidArgument(format!("κ(A) = {ka} must lie strictly between 0 and 1")));
    }
    Ok(ka)
}

pub fn h_value(in_a: &[bool], ka: f64, ray: usize, r: f64) -> f64 {
    if in_a[ray] {
        -(1.0 - ka) * r
    } else {
        ka * r
    }
}

/// Writes `ray_id,radius,tau,local_time,stopped`.
pub fn write_samples_csv<W: Write>(mut out: W, samples: &[StoppedSample], ids: &[String]) -> io::Result<()> {
    writeln!(out, "ray_id,radius,tau,local_time,stopped")?;
    for s in samples {
        writeln!(out, "{},{},{},{},{}", ids[s.ray], s.radius, s.tau, s.local_time, s.stopped)?;
    }
    Ok(())
}

/// Writes `t,W,R,L,ray_id`.
pub fn write_path_csv<W: Write>(mut out: W, path: &WalshPath, ids: &[String]) -> io::Result<()> {
    writeln!(out, "t,W,R,L,ray_id")?;
    for i in 0..path.len() {
        writeln!(out, "{},{},{},{},{}", path.t[i], path.w[i], path.r[i], path.l[i], ids[path.ray[i]])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_rays() -> SpinningMeasure {
        SpinningMeasure::new([("A", 0.5), ("B", 0.5)]).unwrap()
    }

    #[test]
    fn levy_coupling_is_exact() {
        let p = simulate_path(&two_rays(), &SimParams::new(1e-3, 1.0, 1, 7), 3).unwrap();
        assert_eq!(p.len(), 1001);
        assert_eq!((p.r[0], p.l[0]), (0.0, 0.0));
        for i in 0..p.len() {
            assert_eq!(p.r[i], p.m[i] - p.w[i]);
            assert_eq!(p.l[i], p.m[i]);
            assert!(p.r[i] >= 0.0);
            if i > 0 {
                assert!(p.l[i] >= p.l[i - 1]);
                if p.ray[i] != p.ray[i - 1] {
                    assert!(p.l[i] > p.l[i - 1]);
                }
            }
        }
        assert!((p.t[1000] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_ray_label_is_constant() {
        let k = SpinningMeasure::new([("only", 1.0)]).unwrap();
        let p = simulate_path(&k, &SimParams::new(1e-2, 5.0, 1, 1), 0).unwrap();
        assert!(p.ray.iter().all(|&g| g == 0));
    }

    #[test]
    fn reproducible_streams() {
        let params = SimParams::new(1e-3, 0.5, 1, 99);
        let a = simulate_path(&two_rays(), &params, 5).unwrap();
        let b = simulate_path(&two_rays(), &params, 5).unwrap();
        let c = simulate_path(&two_rays(), &params, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.w, c.w);
    }

    #[test]
    fn fixed_time_stops_exactly() {
        let params = SimParams::new(0.03, 10.0, 4, 2);
        let s = run_until(&StoppingRule::FixedTime(1.0), &two_rays(), &params).unwrap();
        for x in &s {
            assert!(x.stopped);
            assert!((x.tau - 1.0).abs() < 1e-12, "{}", x.tau);
        }
        let late = run_until(&StoppingRule::FixedTime(20.0), &two_rays(), &params).unwrap();
        assert!(late.iter().all(|x| !x.stopped && x.tau <= 10.0 + 1e-12));
    }

    #[test]
    fn trace_matches_stream() {
        let params = SimParams::new(1e-3, 50.0, 1, 11);
        let rule = StoppingRule::HitSurface(vec![1.0, 2.0]);
        let (path, s) = trace_until(&rule, &two_rays(), &params, 4).unwrap();
        let direct = run_one(&rule, &two_rays(), &params, 4).unwrap();
        assert_eq!(s, direct);
        assert_eq!(*path.t.last().unwrap(), s.tau);
        assert_eq!(*path.ray.last().unwrap(), s.ray);
    }

    #[test]
    fn parallel_and_serial_agree() {
        let params = SimParams::new(1e-3, 50.0, 16, 3);
        let rule = StoppingRule::HitSurface(vec![0.5, 1.0]);
        let par = run_until(&rule, &two_rays(), &params).unwrap();
        let ser: Vec<_> = (0..16).map(|i| run_one(&rule, &two_rays(), &params, i).unwrap()).collect();
        assert_eq!(par, ser);
    }

    #[test]
    fn surface_law_closed_form() {
        let (pmf, et) = surface_hit_law(&two_rays(), &[2.0, 2.0]).unwrap();
        assert_eq!(pmf, vec![0.5, 0.5]);
        assert!((et - 4.0).abs() < 1e-15);
        let (pmf, et) = surface_hit_law(&two_rays(), &[1.0, 2.0]).unwrap();
        assert!((pmf[0] - 2.0 / 3.0).abs() < 1e-15 && (pmf[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((et - 2.0).abs() < 1e-15);
        let single = SpinningMeasure::new([("g", 1.0)]).unwrap();
        let (pmf, et) = surface_hit_law(&single, &[3.0]).unwrap();
        assert_eq!((pmf, et), (vec![1.0], 9.0));
        assert!(surface_hit_law(&two_rays(), &[1.0, 0.0]).is_err());
    }

    #[test]
    fn excursion_counts_edge_cases() {
        let p = simulate_path(&two_rays(), &SimParams::new(1e-3, 2.0, 1, 5), 0).unwrap();
        assert_eq!(excursion_counts(&p, 1.0, 0.0), 0);
        let top = p.r.iter().cloned().fold(0.0, f64::max);
        assert_eq!(excursion_counts(&p, top * 1.01, 100.0), 0);
        assert!(excursion_counts(&p, top, 100.0) >= 1);
    }

    #[test]
    fn h_linear_definition() {
        let k = two_rays();
        let mut path = WalshPath::default();
        path.push(0.0, 0.0, 0.0, 0);
        path.push(1.0, -1.0, 0.0, 0);
        path.push(2.0, -2.0, 0.0, 1);
        let h = h_linear(&path, &[true, false], &k).unwrap();
        assert_eq!(h, vec![0.0, -0.5, 1.0]);
        assert!(h_linear(&path, &[true, true], &k).is_err());
    }

    #[test]
    fn parameter_validation() {
        let k = two_rays();
        assert!(simulate_path(&k, &SimParams::new(0.0, 1.0, 1, 0), 0).is_err());
        assert!(run_until(&StoppingRule::FixedTime(1.0), &k, &SimParams::new(0.1, 1.0, 0, 0)).is_err());
        assert!(run_until(&StoppingRule::HitSurface(vec![1.0]), &k, &SimParams::new(0.1, 1.0, 1, 0)).is_err());
    }

    #[test]
    fn csv_output_is_stable() {
        let s = StoppedSample { ray: 1, radius: 2.0, tau: 0.5, local_time: 0.25, stopped: true, peaks: vec![] };
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &[s], &["A".into(), "B".into()]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "ray_id,radius,tau,local_time,stopped\nB,2,0.5,0.25,true\n");
    }
}
