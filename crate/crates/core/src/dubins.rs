//! Iterated-barycenter embedding.
//!
//! Each ray's radial law is split recursively: level `l + 1` adds the
//! barycenter of every level-`l` interval. The stopping rule first waits for
//! the radius to reach the ray barycenter `m_γ`, then repeatedly exits the
//! interval spanned by the two child barycenters of the current point. The law
//! after `d` stages and its expected duration are available in closed form.

use crate::error::{Error, Result};
use crate::measure::{centering_deviation, interval_barycenter, RadialMeasure, SpinningMeasure, TargetMeasure};
use crate::sim::{LevelTree, StoppingRule};
use crate::stats::wasserstein1_between;

/// Deepest supported refinement; level `l` stores `2^l` intervals per ray.
pub const MAX_DEPTH: usize = 20;

/// Tolerance on the centering condition required by [`dubins_rule`].
pub const CENTERING_TOL: f64 = 1e-9;

/// Refinement levels of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayRefinement {
    pub id: String,
    /// `breakpoints[l]` is `A_l`: `2^l + 1` non-decreasing points from 0 to `∞`.
    pub breakpoints: Vec<Vec<f64>>,
    /// Masses of the `2^l` intervals of `A_l`.
    pub masses: Vec<Vec<f64>>,
    /// Barycenters of the intervals of `A_l` (left endpoint when empty).
    pub barycenters: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementTree {
    pub depth: usize,
    pub rays: Vec<RayRefinement>,
}

fn check_depth(depth: usize) -> Result<()> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::InvalidArgument(format!("depth {depth} must lie in 1..={MAX_DEPTH}")));
    }
    Ok(())
}

fn refine_ray(id: &str, radial: &RadialMeasure, depth: usize) -> RayRefinement {
    let mut breakpoints = vec![vec![0.0, f64::INFINITY]];
    let mut masses = Vec::with_capacity(depth + 1);
    let mut barycenters = Vec::with_capacity(depth + 1);
    for l in 0..=depth {
        let a = &breakpoints[l];
        let (mass, bary): (Vec<f64>, Vec<f64>) =
            a.windows(2).map(|w| (radial.mass(w[0], w[1]), interval_barycenter(radial, w[0], w[1]))).unzip();
        if l < depth {
            let mut next = Vec::with_capacity(2 * a.len() - 1);
            for (i, &x) in a.iter().enumerate() {
                next.push(x);
                if i < bary.len() {
                    next.push(bary[i]);
                }
            }
            breakpoints.push(next);
        }
        masses.push(mass);
        barycenters.push(bary);
    }
    RayRefinement { id: id.to_string(), breakpoints, masses, barycenters }
}

/// Builds `A_0, …, A_depth` on every ray.
pub fn refine(target: &TargetMeasure, depth: usize) -> Result<RefinementTree> {
    check_depth(depth)?;
    Ok(RefinementTree { depth, rays: target.rays().iter().map(|r| refine_ray(&r.id, &r.radial, depth)).collect() })
}

/// `ν_depth = Σ ν([a_i, a_{i+1})) δ_{m_[a_i, a_{i+1})}` over the intervals of
/// `A_{depth-1}`.
pub fn refined_measure(radial: &RadialMeasure, depth: usize) -> Result<RadialMeasure> {
    check_depth(depth)?;
    let r = refine_ray("", radial, depth - 1);
    Ok(level_measure(&r, depth - 1))
}

fn level_atoms(r: &RayRefinement, level: usize) -> Vec<(f64, f64)> {
    let mut atoms: Vec<(f64, f64)> = Vec::new();
    for (&b, &p) in r.barycenters[level].iter().zip(&r.masses[level]) {
        if p <= 0.0 {
            continue;
        }
        match atoms.last_mut() {
            Some(last) if last.0 == b => last.1 += p,
            _ => atoms.push((b, p)),
        }
    }
    atoms
}

fn level_measure(r: &RayRefinement, level: usize) -> RadialMeasure {
    RadialMeasure::discrete(level_atoms(r, level)).expect("refined law is a probability")
}

/// Closed-form law of `Z` after `depth` stages.
#[derive(Debug, Clone, PartialEq)]
pub struct DubinsLaw {
    pub depth: usize,
    pub ray_ids: Vec<String>,
    /// `P[Γ = γ]`, the target ray weights.
    pub ray_pmf: Vec<f64>,
    /// Per ray: `(radius, conditional probability)`, increasing radii.
    pub radial: Vec<Vec<(f64, f64)>>,
    /// `E[τ_depth]`.
    pub expected_tau: f64,
    /// `E[τ_d]` for `d = 1..=depth`.
    pub expected_tau_by_depth: Vec<f64>,
    /// Weighted per-ray 1-Wasserstein distance to the target.
    pub wasserstein_gap: f64,
    /// Whether the target is reached exactly at this depth.
    pub exact: bool,
}

/// Exact law of `Z_{τ_depth}` and `E[τ_d]`, assuming the centered spinning
/// measure.
pub fn analytic_law(target: &TargetMeasure, depth: usize) -> Result<DubinsLaw> {
    check_depth(depth)?;
    let tree: Vec<RayRefinement> = target.rays().iter().map(|r| refine_ray(&r.id, &r.radial, depth - 1)).collect();
    let mut expected_tau_by_depth = Vec::with_capacity(depth);
    for level in 0..depth {
        let e: f64 = target
            .rays()
            .iter()
            .zip(&tree)
            .map(|(ray, r)| {
                ray.weight * r.masses[level].iter().zip(&r.barycenters[level]).map(|(p, b)| p * b * b).sum::<f64>()
            })
            .sum();
        expected_tau_by_depth.push(e);
    }
    let mut gap = 0.0;
    let mut radial = Vec::with_capacity(target.len());
    for (ray, r) in target.rays().iter().zip(&tree) {
        let law = level_measure(r, depth - 1);
        gap += ray.weight * wasserstein1_between(&law, &ray.radial);
        radial.push(level_atoms(r, depth - 1));
    }
    Ok(DubinsLaw {
        depth,
        ray_ids: target.rays().iter().map(|r| r.id.clone()).collect(),
        ray_pmf: target.weights(),
        radial,
        expected_tau: *expected_tau_by_depth.last().expect("depth >= 1"),
        expected_tau_by_depth,
        wasserstein_gap: gap,
        exact: gap <= 1e-12,
    })
}

/// The executable `depth`-stage rule, with trees indexed like `kappa`.
pub fn dubins_rule(target: &TargetMeasure, kappa: &SpinningMeasure, depth: usize) -> Result<StoppingRule> {
    check_depth(depth)?;
    let deviation = centering_deviation(target, kappa);
    if deviation > CENTERING_TOL {
        return Err(Error::NotCentered { deviation, tolerance: CENTERING_TOL });
    }
    let trees = kappa
        .ids()
        .iter()
        .map(|id| match target.ray_index(id) {
            Some(i) => {
                let r = refine_ray(id, &target.rays()[i].radial, depth - 1);
                LevelTree { levels: r.barycenters }
            }
            // uncharged label outside the target; never selected
            None => LevelTree { levels: vec![vec![1.0]] },
        })
        .collect();
    Ok(StoppingRule::HitLevelSet(trees))
}
