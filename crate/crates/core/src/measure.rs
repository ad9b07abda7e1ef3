//! Target measures in polar form: per-ray radial laws, barycenters, and the
//! centered spinning measure.
//!
//! A target on the rays of a Walsh Brownian motion is stored as a finite list of
//! labelled rays, each carrying a weight (the law of the ray label) and a
//! [`RadialMeasure`] (the conditional law of the radius). Mass at the origin is
//! spread over the rays as a radius-zero atom in proportion to the ray weights,
//! so nothing downstream needs to treat the origin separately.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a normalized measure.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Inputs whose total mass is further than this from one are rejected rather
/// than rescaled.
pub const INPUT_MASS_TOL: f64 = 1e-6;

/// A constant-density piece on `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityPiece {
    pub lo: f64,
    pub hi: f64,
    pub density: f64,
}

impl DensityPiece {
    fn mass(&self) -> f64 {
        self.density * (self.hi - self.lo)
    }

    /// Overlap of the piece with `[a, b)` as `(lo, hi)`, if non-empty.
    fn clip(&self, a: f64, b: f64) -> Option<(f64, f64)> {
        let lo = self.lo.max(a);
        let hi = self.hi.min(b);
        (hi > lo).then_some((lo, hi))
    }
}

/// A probability measure on `[0, ∞)`: finitely many atoms plus a
/// piecewise-constant density with bounded support.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialMeasure {
    atoms: Vec<(f64, f64)>,
    pieces: Vec<DensityPiece>,
}

/// Merged breakpoint view of a radial measure: knot locations in increasing
/// order, the atom sitting on each knot, and the density on the segment to the
/// right of each knot (zero past the last knot).
#[derive(Debug, Clone, PartialEq)]
pub struct Knots {
    pub x: Vec<f64>,
    pub atom: Vec<f64>,
    pub density: Vec<f64>,
}

impl RadialMeasure {
    /// Validates and normalizes. Total mass must be within [`INPUT_MASS_TOL`] of one.
    pub fn new(atoms: Vec<(f64, f64)>, pieces: Vec<DensityPiece>) -> Result<Self> {
        let raw = Self::unnormalized(atoms, pieces)?;
        let total = raw.total_mass();
        if (total - 1.0).abs() > INPUT_MASS_TOL {
            return Err(Error::InvalidMeasure(format!("radial mass {total} is not 1 (tolerance {INPUT_MASS_TOL:e})")));
        }
        Ok(raw.scaled(1.0 / total))
    }

    /// Validates structure without normalizing.
    pub(crate) fn unnormalized(mut atoms: Vec<(f64, f64)>, mut pieces: Vec<DensityPiece>) -> Result<Self> {
        for &(r, p) in &atoms {
            if !r.is_finite() || r < 0.0 {
                return Err(Error::InvalidMeasure(format!("atom location {r} must be finite and >= 0")));
            }
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidMeasure(format!("atom mass {p} must be finite and >= 0")));
            }
        }
        atoms.retain(|&(_, p)| p > 0.0);
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        if atoms.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidMeasure("atom locations must be distinct".into()));
        }
        for p in &pieces {
            if !(p.lo.is_finite() && p.hi.is_finite()) || p.lo < 0.0 || p.hi <= p.lo {
                return Err(Error::InvalidMeasure(format!(
                    "density interval [{}, {}) must be finite, non-empty and within [0, inf)",
                    p.lo, p.hi
                )));
            }
            if !p.density.is_finite() || p.density < 0.0 {
                return Err(Error::InvalidMeasure(format!("density {} must be finite and >= 0", p.density)));
            }
        }
        pieces.retain(|p| p.density > 0.0);
        pieces.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        if pieces.windows(2).any(|w| w[1].lo < w[0].hi) {
            return Err(Error::InvalidMeasure("density intervals overlap".into()));
        }
        let m = Self { atoms, pieces };
        if m.total_mass() <= 0.0 {
            return Err(Error::InvalidMeasure("radial measure has no mass".into()));
        }
        Ok(m)
    }

    /// Point mass at `c`.
    pub fn point(c: f64) -> Result<Self> {
        Self::new(vec![(c, 1.0)], vec![])
    }

    pub fn discrete(atoms: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(atoms, vec![])
    }

    /// Uniform law on `[a, b)`.
    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        Self::new(vec![], vec![DensityPiece { lo: a, hi: b, density: 1.0 / (b - a) }])
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn pieces(&self) -> &[DensityPiece] {
        &self.pieces
    }

    pub fn is_discrete(&self) -> bool {
        self.pieces.is_empty()
    }

    pub(crate) fn scaled(&self, factor: f64) -> Self {
        Self {
            atoms: self.atoms.iter().map(|&(r, p)| (r, p * factor)).collect(),
            pieces: self.pieces.iter().map(|p| DensityPiece { density: p.density * factor, ..*p }).collect(),
        }
    }

    /// Pushforward under `r -> factor * r` (factor > 0).
    pub(crate) fn dilated(&self, factor: f64) -> Self {
        Self {
            atoms: self.atoms.iter().map(|&(r, p)| (r * factor, p)).collect(),
            pieces: self
                .pieces
                .iter()
                .map(|p| DensityPiece { lo: p.lo * factor, hi: p.hi * factor, density: p.density / factor })
                .collect(),
        }
    }

    /// Adds `mass` at the origin, merging with an existing atom there.
    pub(crate) fn with_origin_atom(mut self, mass: f64) -> Self {
        if mass <= 0.0 {
            return self;
        }
        match self.atoms.first_mut() {
            Some(first) if first.0 == 0.0 => first.1 += mass,
            _ => self.atoms.insert(0, (0.0, mass)),
        }
        self
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum::<f64>() + self.pieces.iter().map(DensityPiece::mass).sum::<f64>()
    }

    /// `ν([a, b))`; `b` may be infinite.
    pub fn mass(&self, a: f64, b: f64) -> f64 {
        let atoms: f64 = self.atoms.iter().filter(|(r, _)| *r >= a && *r < b).map(|a| a.1).sum();
        let dens: f64 = self.pieces.iter().filter_map(|p| p.clip(a, b).map(|(lo, hi)| p.density * (hi - lo))).sum();
        atoms + dens
    }

    /// `∫_[a,b) r ν(dr)`.
    pub fn moment1(&self, a: f64, b: f64) -> f64 {
        let atoms: f64 = self.atoms.iter().filter(|(r, _)| *r >= a && *r < b).map(|(r, p)| r * p).sum();
        let dens: f64 =
            self.pieces.iter().filter_map(|p| p.clip(a, b).map(|(lo, hi)| p.density * (hi * hi - lo * lo) / 2.0)).sum();
        atoms + dens
    }

    /// `∫_[a,b) r² ν(dr)`.
    pub fn moment2(&self, a: f64, b: f64) -> f64 {
        let atoms: f64 = self.atoms.iter().filter(|(r, _)| *r >= a && *r < b).map(|(r, p)| r * r * p).sum();
        let dens: f64 = self
            .pieces
            .iter()
            .filter_map(|p| p.clip(a, b).map(|(lo, hi)| p.density * (hi.powi(3) - lo.powi(3)) / 3.0))
            .sum();
        atoms + dens
    }

    pub fn mean(&self) -> f64 {
        self.moment1(0.0, f64::INFINITY)
    }

    pub fn second_moment(&self) -> f64 {
        self.moment2(0.0, f64::INFINITY)
    }

    /// `ν([0, r])`.
    pub fn cdf(&self, r: f64) -> f64 {
        if r < 0.0 {
            return 0.0;
        }
        let atoms: f64 = self.atoms.iter().filter(|a| a.0 <= r).map(|a| a.1).sum();
        (atoms + self.mass_density_below(r)).min(1.0)
    }

    /// `ν([0, r))`.
    pub fn cdf_left(&self, r: f64) -> f64 {
        self.mass(0.0, r).min(1.0)
    }

    fn mass_density_below(&self, r: f64) -> f64 {
        self.pieces.iter().filter_map(|p| p.clip(0.0, r).map(|(lo, hi)| p.density * (hi - lo))).sum()
    }

    /// Right end of the support.
    pub fn support_max(&self) -> f64 {
        let a = self.atoms.last().map_or(0.0, |a| a.0);
        let p = self.pieces.last().map_or(0.0, |p| p.hi);
        a.max(p)
    }

    pub fn knots(&self) -> Knots {
        let mut x: Vec<f64> = self.atoms.iter().map(|a| a.0).collect();
        for p in &self.pieces {
            x.push(p.lo);
            x.push(p.hi);
        }
        x.sort_by(f64::total_cmp);
        x.dedup();
        let atom = x.iter().map(|&k| self.atoms.iter().find(|a| a.0 == k).map_or(0.0, |a| a.1)).collect();
        let density =
            x.iter().map(|&k| self.pieces.iter().find(|p| p.lo <= k && k < p.hi).map_or(0.0, |p| p.density)).collect();
        Knots { x, atom, density }
    }
}

/// `m_γ`, the mean radius of a ray law.
pub fn ray_barycenter(radial: &RadialMeasure) -> f64 {
    radial.mean()
}

/// Conditional mean of `ν` on `[a, b)`; when the interval carries no mass the
/// left endpoint is returned.
pub fn interval_barycenter(radial: &RadialMeasure, a: f64, b: f64) -> f64 {
    debug_assert!(a <= b);
    let mass = radial.mass(a, b);
    if mass <= 0.0 {
        return a;
    }
    // a single atom is its own barycenter; dividing would round it
    let mut inside = radial.atoms().iter().filter(|(r, _)| *r >= a && *r < b);
    if let (Some(&(r, p)), None) = (inside.next(), inside.next()) {
        if p == mass {
            return r;
        }
    }
    (radial.moment1(a, b) / mass).clamp(a, b)
}

/// One labelled ray of a target.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub id: String,
    pub weight: f64,
    pub radial: RadialMeasure,
    pub barycenter: f64,
}

/// A target measure in polar form. Weights sum to one; origin mass, if any, is
/// already folded into each ray as a radius-zero atom.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMeasure {
    rays: Vec<Ray>,
    origin_mass: f64,
}

/// Unvalidated description of a ray, as read from a spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRay {
    pub id: String,
    pub weight: f64,
    #[serde(default)]
    pub atoms: Vec<(f64, f64)>,
    #[serde(default)]
    pub pieces: Vec<(f64, f64, f64)>,
}

/// Unvalidated description of a target measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMeasure {
    pub rays: Vec<RawRay>,
    #[serde(default)]
    pub origin_mass: f64,
}

impl RawRay {
    pub fn atoms(id: &str, weight: f64, atoms: &[(f64, f64)]) -> Self {
        Self { id: id.into(), weight, atoms: atoms.to_vec(), pieces: vec![] }
    }
}

/// Builds a normalized [`TargetMeasure`] from a raw description.
///
/// Ray weights are relative and get normalized; each ray's radial part must be
/// a probability measure. Origin mass `k` is placed on every ray as an atom at
/// radius zero with mass proportional to the ray weight.
pub fn polar_decompose(raw: &RawMeasure) -> Result<TargetMeasure> {
    let k = raw.origin_mass;
    if !k.is_finite() || k < 0.0 {
        return Err(Error::InvalidMeasure(format!("origin mass {k} must be in [0, 1)")));
    }
    if k >= 1.0 {
        return Err(Error::TrivialTarget(k));
    }
    if raw.rays.is_empty() {
        return Err(Error::InvalidMeasure("no rays".into()));
    }
    let mut seen = HashSet::new();
    for r in &raw.rays {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::InvalidMeasure(format!("duplicate ray id `{}`", r.id)));
        }
        if !r.weight.is_finite() || r.weight < 0.0 {
            return Err(Error::InvalidMeasure(format!("ray `{}` has weight {}", r.id, r.weight)));
        }
    }
    let total: f64 = raw.rays.iter().map(|r| r.weight).sum();
    if total <= 0.0 {
        return Err(Error::InvalidMeasure("ray weights sum to zero".into()));
    }

    let mut rays = Vec::with_capacity(raw.rays.len());
    for r in &raw.rays {
        let pieces = r.pieces.iter().map(|&(lo, hi, density)| DensityPiece { lo, hi, density }).collect();
        let radial = RadialMeasure::new(r.atoms.clone(), pieces)
            .map_err(|e| Error::InvalidMeasure(format!("ray `{}`: {e}", r.id)))?;
        if r.weight == 0.0 {
            continue;
        }
        let radial = radial.scaled(1.0 - k).with_origin_atom(k);
        let radial = radial.scaled(1.0 / radial.total_mass());
        let barycenter = radial.mean();
        rays.push(Ray { id: r.id.clone(), weight: r.weight / total, radial, barycenter });
    }
    let wsum: f64 = rays.iter().map(|r| r.weight).sum();
    for r in &mut rays {
        r.weight /= wsum;
    }
    let target = TargetMeasure { rays, origin_mass: k };
    if target.first_moment() <= 0.0 {
        return Err(Error::InvalidMeasure("all mass sits at the origin".into()));
    }
    Ok(target)
}

impl TargetMeasure {
    pub fn rays(&self) -> &[Ray] {
        &self.rays
    }

    pub fn origin_mass(&self) -> f64 {
        self.origin_mass
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.rays.iter().map(|r| r.id.as_str()).collect()
    }

    pub fn ray_index(&self, id: &str) -> Option<usize> {
        self.rays.iter().position(|r| r.id == id)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.rays.iter().map(|r| r.weight).collect()
    }

    /// `m = Σ w_γ m_γ`, the mean modulus.
    pub fn first_moment(&self) -> f64 {
        self.rays.iter().map(|r| r.weight * r.barycenter).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.rays.iter().map(|r| r.weight * r.radial.second_moment()).sum()
    }

    /// Mass strictly off the origin in `γ × [r, ∞)`.
    pub fn tail_mass(&self, ray: usize, r: f64) -> f64 {
        let ray = &self.rays[ray];
        ray.weight * ray.radial.mass(r, f64::INFINITY)
    }
}

pub fn first_moment(target: &TargetMeasure) -> f64 {
    target.first_moment()
}

pub fn second_moment(target: &TargetMeasure) -> f64 {
    target.second_moment()
}

/// A discrete probability over ray labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinningMeasure {
    ids: Vec<String>,
    probs: Vec<f64>,
}

impl SpinningMeasure {
    /// Validates and normalizes; the input total must be within
    /// [`INPUT_MASS_TOL`] of one.
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, f64)>) -> Result<Self> {
        let (ids, probs): (Vec<String>, Vec<f64>) = entries.into_iter().map(|(s, p)| (s.into(), p)).unzip();
        if ids.is_empty() {
            return Err(Error::InvalidSpinning("no rays".into()));
        }
        let mut seen = HashSet::new();
        for (id, &p) in ids.iter().zip(&probs) {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidSpinning(format!("duplicate ray `{id}`")));
            }
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidSpinning(format!("ray `{id}` has probability {p}")));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > INPUT_MASS_TOL {
            return Err(Error::InvalidSpinning(format!("probabilities sum to {total}")));
        }
        let probs = probs.into_iter().map(|p| p / total).collect();
        Ok(Self { ids, probs })
    }

    /// Uniform over the given labels.
    pub fn uniform<S: Into<String>>(ids: impl IntoIterator<Item = S>) -> Result<Self> {
        let ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        let p = 1.0 / ids.len().max(1) as f64;
        Self::new(ids.into_iter().map(|id| (id, p)))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Probability of `id`, zero when absent.
    pub fn prob(&self, id: &str) -> f64 {
        self.ids.iter().position(|s| s == id).map_or(0.0, |i| self.probs[i])
    }

    pub fn index(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }

    /// `κ(A)` for a set of labels.
    pub fn mass_of(&self, set: &[&str]) -> f64 {
        set.iter().map(|id| self.prob(id)).sum()
    }

    /// The same measure re-indexed in the target's ray order. Fails if `self`
    /// charges a label the target does not have.
    pub fn aligned_to(&self, target: &TargetMeasure) -> Result<SpinningMeasure> {
        for (id, &p) in self.ids.iter().zip(&self.probs) {
            if p > 0.0 && target.ray_index(id).is_none() {
                return Err(Error::InvalidSpinning(format!("ray `{id}` is not a target ray")));
            }
        }
        Ok(SpinningMeasure {
            ids: target.rays().iter().map(|r| r.id.clone()).collect(),
            probs: target.rays().iter().map(|r| self.prob(&r.id)).collect(),
        })
    }
}

/// The unique spinning measure admitting integrable embeddings:
/// `κ(γ) = m_γ w_γ / m`.
pub fn centered_spinning(target: &TargetMeasure) -> Result<SpinningMeasure> {
    if let Some(r) = target.rays().iter().find(|r| r.weight > 0.0 && r.barycenter <= 0.0) {
        return Err(Error::DegenerateRay(r.id.clone()));
    }
    let m = target.first_moment();
    let mut probs: Vec<f64> = target.rays().iter().map(|r| r.barycenter * r.weight / m).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(SpinningMeasure { ids: target.rays().iter().map(|r| r.id.clone()).collect(), probs })
}

/// Whether `κ` charges every ray the target charges.
pub fn is_admissible(target: &TargetMeasure, kappa: &SpinningMeasure) -> bool {
    target.rays().iter().filter(|r| r.weight > 0.0).all(|r| kappa.prob(&r.id) > 0.0)
}

/// Largest deviation of `κ` from the centered spinning measure, over the union
/// of labels.
pub fn centering_deviation(target: &TargetMeasure, kappa: &SpinningMeasure) -> f64 {
    let m = target.first_moment();
    let on_target = target.rays().iter().map(|r| (kappa.prob(&r.id) - r.barycenter * r.weight / m).abs());
    let off_target =
        kappa.ids().iter().zip(kappa.probs()).filter(|(id, _)| target.ray_index(id).is_none()).map(|(_, &p)| p);
    on_target.chain(off_target).fold(0.0, f64::max)
}

pub fn is_centered(target: &TargetMeasure, kappa: &SpinningMeasure, tol: f64) -> bool {
    target.first_moment() > 0.0 && centering_deviation(target, kappa) <= tol
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn point_mass_target() {
        let t = polar_decompose(&RawMeasure { rays: vec![RawRay::atoms("A", 1.0, &[(2.5, 1.0)])], origin_mass: 0.0 })
            .unwrap();
        assert_eq!(t.rays()[0].weight, 1.0);
        assert_eq!(t.rays()[0].barycenter, 2.5);
        assert_eq!(t.first_moment(), 2.5);
        assert_eq!(t.second_moment(), 6.25);
    }

    #[test]
    fn m1_moments() {
        let t = m1();
        assert!(close(t.rays()[0].barycenter, 2.0, 1e-15));
        assert!(close(t.rays()[1].barycenter, 2.0, 1e-15));
        assert!(close(t.first_moment(), 2.0, 1e-15));
        assert!(close(t.second_moment(), 4.5, 1e-15));
    }

    #[test]
    fn m2_moments_and_kappa() {
        let t = m2();
        assert!(close(t.first_moment(), 7.0 / 3.0, 1e-15));
        assert!(close(t.second_moment(), 7.0, 1e-14));
        let k = centered_spinning(&t).unwrap();
        for (p, e) in k.probs().iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert!(close(*p, e, 1e-15));
        }
        let uniform = SpinningMeasure::uniform(["a", "b", "c"]).unwrap();
        assert!(!is_centered(&t, &uniform, 1e-6));
        assert!(is_admissible(&t, &uniform));
    }

    #[test]
    fn origin_mass_is_rejected_at_one() {
        let raw = RawMeasure {
            rays: vec![RawRay::atoms("A", 1.0, &[(1.0, 1.0)]), RawRay::atoms("B", 1.0, &[(1.0, 1.0)])],
            origin_mass: 1.0,
        };
        assert_eq!(polar_decompose(&raw), Err(Error::TrivialTarget(1.0)));
    }

    #[test]
    fn origin_mass_spread_proportionally() {
        let raw = RawMeasure {
            rays: vec![RawRay::atoms("A", 3.0, &[(1.0, 1.0)]), RawRay::atoms("B", 1.0, &[(2.0, 1.0)])],
            origin_mass: 0.2,
        };
        let t = polar_decompose(&raw).unwrap();
        assert!(close(t.rays()[0].weight, 0.75, 1e-15));
        // each ray's conditional law puts k = 0.2 at the origin
        for r in t.rays() {
            assert_eq!(r.radial.atoms()[0].0, 0.0);
            assert!(close(r.radial.atoms()[0].1, 0.2, 1e-15));
            assert!(close(r.radial.total_mass(), 1.0, NORMALIZATION_TOL));
        }
        // joint mass at the origin is k
        let origin: f64 = t.rays().iter().map(|r| r.weight * r.radial.mass(0.0, 1e-300)).sum();
        assert!(close(origin, 0.2, 1e-15));
    }

    #[test]
    fn structural_errors() {
        let bad_weight = RawMeasure { rays: vec![RawRay::atoms("A", -1.0, &[(1.0, 1.0)])], origin_mass: 0.0 };
        assert!(matches!(polar_decompose(&bad_weight), Err(Error::InvalidMeasure(_))));
        let empty = RawMeasure { rays: vec![], origin_mass: 0.0 };
        assert!(matches!(polar_decompose(&empty), Err(Error::InvalidMeasure(_))));
        let off_mass = RawMeasure { rays: vec![RawRay::atoms("A", 1.0, &[(1.0, 0.9)])], origin_mass: 0.0 };
        assert!(matches!(polar_decompose(&off_mass), Err(Error::InvalidMeasure(_))));
        assert!(RadialMeasure::new(vec![(1.0, 0.5), (1.0, 0.5)], vec![]).is_err());
        assert!(RadialMeasure::new(
            vec![],
            vec![DensityPiece { lo: 0.0, hi: 2.0, density: 0.25 }, DensityPiece { lo: 1.0, hi: 3.0, density: 0.25 }]
        )
        .is_err());
    }

    #[test]
    fn tiny_mass_error_is_renormalized() {
        let r = RadialMeasure::discrete(vec![(1.0, 0.5 + 4e-7), (2.0, 0.5)]).unwrap();
        assert!(close(r.total_mass(), 1.0, NORMALIZATION_TOL));
    }

    #[test]
    fn barycenters() {
        let u = RadialMeasure::uniform(0.0, 2.0).unwrap();
        assert!(close(ray_barycenter(&u), 1.0, 1e-15));
        let t = m1();
        let a = &t.rays()[0].radial;
        assert!(close(interval_barycenter(a, 0.0, 2.0), 1.0, 1e-15));
        assert!(close(interval_barycenter(a, 0.0, f64::INFINITY), 2.0, 1e-15));
        assert_eq!(interval_barycenter(a, 5.0, 6.0), 5.0);
        assert!(close(interval_barycenter(&u, 0.5, 1.5), 1.0, 1e-15));
    }

    #[test]
    fn spinning_checks() {
        let t = m1();
        let k = centered_spinning(&t).unwrap();
        assert!(close(k.prob("A"), 0.5, 1e-15) && close(k.prob("B"), 0.5, 1e-15));
        assert!(is_admissible(&t, &k));
        assert!(is_centered(&t, &k, 1e-12));
        let only_a = SpinningMeasure::new([("A", 1.0)]).unwrap();
        assert!(!is_admissible(&t, &only_a));
        let single =
            polar_decompose(&RawMeasure { rays: vec![RawRay::atoms("g", 1.0, &[(3.0, 1.0)])], origin_mass: 0.0 })
                .unwrap();
        let ks = centered_spinning(&single).unwrap();
        assert_eq!(ks.probs(), &[1.0]);
        assert!(is_centered(&single, &ks, 0.0));
        // an extra charged label breaks centering
        let extra = SpinningMeasure::new([("A", 0.4), ("B", 0.4), ("C", 0.2)]).unwrap();
        assert!(!is_centered(&t, &extra, 1e-3));
    }

    #[test]
    fn degenerate_ray_rejected_by_centering() {
        let raw = RawMeasure {
            rays: vec![RawRay::atoms("A", 1.0, &[(0.0, 1.0)]), RawRay::atoms("B", 1.0, &[(2.0, 1.0)])],
            origin_mass: 0.0,
        };
        let t = polar_decompose(&raw).unwrap();
        assert_eq!(centered_spinning(&t), Err(Error::DegenerateRay("A".into())));
    }

    #[test]
    fn cdf_is_right_continuous() {
        let r =
            RadialMeasure::new(vec![(1.0, 0.25), (3.0, 0.25)], vec![DensityPiece { lo: 1.0, hi: 2.0, density: 0.5 }])
                .unwrap();
        assert_eq!(r.cdf(0.999), 0.0);
        assert!(close(r.cdf(1.0), 0.25, 1e-15));
        assert!(close(r.cdf_left(1.0), 0.0, 1e-15));
        assert!(close(r.cdf(1.5), 0.5, 1e-15));
        assert!(close(r.cdf(3.0), 1.0, 1e-15));
        let k = r.knots();
        assert_eq!(k.x, vec![1.0, 2.0, 3.0]);
        assert_eq!(k.atom, vec![0.25, 0.0, 0.25]);
        assert_eq!(k.density, vec![0.5, 0.0, 0.0]);
    }

    fn discrete_measure() -> impl Strategy<Value = RadialMeasure> {
        prop::collection::btree_map(0u32..400, 1u32..100, 1..12).prop_map(|m| {
            let total: u32 = m.values().sum();
            RadialMeasure::discrete(m.into_iter().map(|(x, w)| (x as f64 / 40.0, w as f64 / total as f64)).collect())
                .unwrap()
        })
    }

    proptest! {
        #[test]
        fn barycenter_splitting_identities(nu in discrete_measure(), a1 in 0.0f64..5.0, len in 0.1f64..12.0) {
            let a2 = a1 + len;
            let total = nu.mass(a1, a2);
            let b = interval_barycenter(&nu, a1, a2);
            let b1 = interval_barycenter(&nu, a1, b);
            let b2 = interval_barycenter(&nu, b, a2);
            prop_assume!(total > 0.0 && b2 - b1 > 1e-9);
            let lhs = total * (b2 - b) / (b2 - b1);
            prop_assert!((lhs - nu.mass(a1, b)).abs() < 1e-10);
            let lhs2 = total * (b * b + (b2 - b) * (b - b1));
            let rhs2 = nu.mass(a1, b) * b1 * b1 + nu.mass(b, a2) * b2 * b2;
            prop_assert!((lhs2 - rhs2).abs() < 1e-10);
        }

        #[test]
        fn centered_kappa_is_centered_and_admissible(
            ws in prop::collection::vec(1u32..50, 1..6),
            locs in prop::collection::vec(1u32..50, 6),
        ) {
            let rays = ws.iter().enumerate().map(|(i, &w)| {
                RawRay::atoms(&format!("r{i}"), w as f64, &[(locs[i] as f64 / 7.0, 0.5), (locs[i] as f64 / 3.0, 0.5)])
            }).collect();
            let t = polar_decompose(&RawMeasure { rays, origin_mass: 0.0 }).unwrap();
            let k = centered_spinning(&t).unwrap();
            prop_assert!(is_centered(&t, &k, 1e-12));
            prop_assert!(is_admissible(&t, &k));
            // Σ w_γ m_γ = Σ κ_γ m
            let m = t.first_moment();
            let lhs: f64 = t.rays().iter().map(|r| r.weight * r.barycenter).sum();
            let rhs: f64 = k.probs().iter().map(|p| p * m).sum();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
