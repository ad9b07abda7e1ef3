//! Barrier embedding driven by the local time at the origin, and its dual
//! certificate.
//!
//! On each ray the target is rescaled to `X = m U / m_γ` (so every ray has
//! mean `m`) and summarized by its potential `c_γ(r) = m + ∫_0^r F_X`. The
//! tangent to `c_γ` through `(0, s)` touches at `ζ_γ(s)` with slope `φ_γ(s)`;
//! with `Λ = Σ w_γ φ_γ` and `H = ∫ ds / Λ` the rule stops an excursion on ray
//! `γ` once its radius reaches `a_γ(l) = (m_γ / m) ζ_γ(H⁻¹(l))`.
//!
//! In terms of the partial moment `P(y) = E[X; X < y]`, the touching point is
//! `ζ(s) = sup { y : P(y) <= m - s }`. It is pinned at an atom while `m - s`
//! crosses the atom's jump in `P`, and sweeps continuously over density
//! pieces. `Λ` is affine wherever every ray is pinned, which makes `H` and its
//! inverse closed-form there.

use std::io::{self, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::measure::{centered_spinning, RadialMeasure, SpinningMeasure, TargetMeasure};
use crate::quad::{integrate_exp_weighted, GaussLegendre};
use crate::sim::{h_weight, BarrierLevels, StoppedSample, StoppingRule, WalshPath};

/// Potential of one ray in the rescaled coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialFn {
    pub id: String,
    m: f64,
    m_gamma: f64,
    x: Vec<f64>,
    atom: Vec<f64>,
    dens: Vec<f64>,
    /// `P(x_k)`, excluding the atom at `x_k`.
    p_minus: Vec<f64>,
    /// `P(x_k+)`, including it.
    p_plus: Vec<f64>,
    /// `F(x_k)`, right-continuous.
    f_plus: Vec<f64>,
    /// `c(x_k)`.
    c_at: Vec<f64>,
}

impl PotentialFn {
    fn new(id: &str, radial: &RadialMeasure, m: f64, m_gamma: f64) -> Self {
        let k = radial.dilated(m / m_gamma).knots();
        let n = k.x.len();
        let (mut p_minus, mut p_plus, mut f_plus, mut c_at) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            if i == 0 {
                c_at[0] = m;
                f_plus[0] = k.atom[0];
            } else {
                let (x0, x1, d) = (k.x[i - 1], k.x[i], k.density[i - 1]);
                let h = x1 - x0;
                p_minus[i] = p_plus[i - 1] + d * (x1 * x1 - x0 * x0) / 2.0;
                c_at[i] = c_at[i - 1] + f_plus[i - 1] * h + d * h * h / 2.0;
                f_plus[i] = f_plus[i - 1] + d * h + k.atom[i];
            }
            p_plus[i] = p_minus[i] + k.atom[i] * k.x[i];
        }
        Self { id: id.to_string(), m, m_gamma, x: k.x, atom: k.atom, dens: k.density, p_minus, p_plus, f_plus, c_at }
    }

    /// Index of the last knot `<= r`.
    fn seg(&self, r: f64) -> Option<usize> {
        self.x.partition_point(|&x| x <= r).checked_sub(1)
    }

    /// `c_γ(r)`.
    pub fn value(&self, r: f64) -> f64 {
        match self.seg(r) {
            None => self.m,
            Some(k) => {
                let h = r - self.x[k];
                self.c_at[k] + self.f_plus[k] * h + self.dens[k] * h * h / 2.0
            }
        }
    }

    /// `∂₊c_γ(r) = μ̃_γ([0, m_γ r / m])`.
    pub fn right_derivative(&self, r: f64) -> f64 {
        match self.seg(r) {
            None => 0.0,
            Some(k) => (self.f_plus[k] + self.dens[k] * (r - self.x[k])).min(1.0),
        }
    }

    /// `P(y) = E[X; X < y]`.
    pub fn partial_moment(&self, y: f64) -> f64 {
        match self.x.partition_point(|&x| x < y).checked_sub(1) {
            None => 0.0,
            Some(k) => self.p_plus[k] + self.dens[k] * (y * y - self.x[k] * self.x[k]) / 2.0,
        }
    }

    /// `E[X; X <= y]`.
    fn partial_moment_right(&self, y: f64) -> f64 {
        match self.seg(y) {
            None => 0.0,
            Some(k) => self.p_plus[k] + self.dens[k] * (y * y - self.x[k] * self.x[k]) / 2.0,
        }
    }

    /// `sup { y : P(y) <= v }` for `v < m`.
    fn zeta_at(&self, v: f64) -> f64 {
        let k = self.p_minus.partition_point(|&p| p <= v).saturating_sub(1);
        if self.p_plus[k] > v || self.dens[k] <= 0.0 {
            return self.x[k];
        }
        let y = (self.x[k] * self.x[k] + 2.0 * (v - self.p_plus[k]) / self.dens[k]).sqrt();
        match self.x.get(k + 1) {
            Some(&next) => y.clamp(self.x[k], next),
            None => self.x[k],
        }
    }

    /// `ζ_γ(s)`; infinite at `s <= 0`.
    pub fn zeta(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return f64::INFINITY;
        }
        self.zeta_at(self.m - s)
    }

    /// `ζ_γ(m-)`, the smallest point of the rescaled support.
    pub fn zeta_floor(&self) -> f64 {
        self.zeta_at(0.0)
    }

    /// `φ_γ(s) = (c_γ(ζ) - s) / ζ`, the slope of the tangent through `(0, s)`.
    pub fn phi(&self, s: f64) -> f64 {
        let z = self.zeta(s);
        if z.is_infinite() {
            return 1.0;
        }
        (self.value(z) - s) / z
    }

    /// `(ζ_γ(s), φ_γ(s))` for `0 <= s < m`.
    pub fn tangent(&self, s: f64) -> Result<(f64, f64)> {
        if !(s >= 0.0 && s < self.m) {
            return Err(Error::InvalidArgument(format!("tangent needs 0 <= s < m = {}, got {s}", self.m)));
        }
        Ok((self.zeta(s), self.phi(s)))
    }

    /// The values of `s` where `ζ_γ` changes regime.
    fn s_breaks(&self) -> impl Iterator<Item = f64> + '_ {
        self.p_minus.iter().chain(&self.p_plus).map(|p| self.m - p).filter(|&s| s > 0.0 && s < self.m)
    }

    /// Whether `ζ_γ` sits on an atom at `v = m - s`.
    fn pinned_at(&self, v: f64) -> bool {
        let k = self.p_minus.partition_point(|&p| p <= v).saturating_sub(1);
        self.p_plus[k] > v || self.dens[k] <= 0.0
    }

    pub fn has_origin_atom(&self) -> bool {
        self.x.first() == Some(&0.0) && self.atom[0] > 0.0
    }
}

/// Potentials of all rays of a target.
pub fn potential(target: &TargetMeasure) -> Result<Vec<PotentialFn>> {
    let m = target.first_moment();
    target
        .rays()
        .iter()
        .map(|r| {
            if r.barycenter <= 0.0 {
                return Err(Error::DegenerateRay(r.id.clone()));
            }
            Ok(PotentialFn::new(&r.id, &r.radial, m, r.barycenter))
        })
        .collect()
}

/// `(ζ_γ(s), φ_γ(s))`.
pub fn tangent(c: &PotentialFn, s: f64) -> Result<(f64, f64)> {
    c.tangent(s)
}

/// Discretization settings for [`build_barrier`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridParams {
    /// Panels per curved piece of `Λ`.
    pub panels: usize,
    /// `H` is tabulated until `Λ` falls to this level on a curved final piece.
    pub lambda_floor: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        Self { panels: 32, lambda_floor: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    /// `Λ` affine with slope `-beta`; `ζ_γ` frozen at `zeta[γ]`.
    Linear { beta: f64, zeta: Vec<f64> },
    /// `Λ` smooth; `H` tabulated at panel ends `(s, H)`.
    Curved { panels: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq)]
struct Piece {
    s0: f64,
    s1: f64,
    h0: f64,
    h1: f64,
    lam0: f64,
    shape: Shape,
}

/// Tabulated barrier: `Λ`, `H`, `H⁻¹` and `a_γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Barrier {
    m: f64,
    rays: Vec<PotentialFn>,
    weights: Vec<f64>,
    kappa: SpinningMeasure,
    pieces: Vec<Piece>,
    /// Local time at which `Λ(H⁻¹(l))` reaches the floor.
    pub l_max: f64,
    /// Mass of `L_τ` beyond the exactly tabulated range; zero when the final
    /// piece of `Λ` is affine.
    pub truncated_mass: f64,
}

/// Builds the barrier of a target, always paired with its centered spinning
/// measure.
pub fn build_barrier(target: &TargetMeasure, grid: GridParams) -> Result<Barrier> {
    if grid.panels < 2 {
        return Err(Error::InvalidArgument(format!("{} panels per piece; at least 2 required", grid.panels)));
    }
    if !(grid.lambda_floor > 0.0 && grid.lambda_floor < 1.0) {
        return Err(Error::InvalidArgument(format!("lambda floor {} must lie in (0, 1)", grid.lambda_floor)));
    }
    let rays = potential(target)?;
    if let Some(r) = rays.iter().find(|r| r.has_origin_atom()) {
        return Err(Error::Unsupported(format!(
            "ray `{}` has mass at the origin; the barrier would need to stop at time zero",
            r.id
        )));
    }
    let m = target.first_moment();
    let weights = target.weights();
    let kappa = centered_spinning(target)?;

    let mut breaks: Vec<f64> = vec![0.0, m];
    for r in &rays {
        breaks.extend(r.s_breaks());
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * m);
    *breaks.last_mut().expect("non-empty") = m;

    let mut b = Barrier { m, rays, weights, kappa, pieces: Vec::new(), l_max: 0.0, truncated_mass: 0.0 };
    let rule = GaussLegendre::eight();
    let mut h0 = 0.0;
    let mut lam0 = 1.0;
    let n = breaks.len() - 1;
    for j in 0..n {
        let (s0, s1) = (breaks[j], breaks[j + 1]);
        let v_mid = m - 0.5 * (s0 + s1);
        let last = j + 1 == n;
        let linear = b.rays.iter().all(|r| r.pinned_at(v_mid));
        if linear {
            let zeta: Vec<f64> = b.rays.iter().map(|r| r.zeta_at(v_mid)).collect();
            let beta: f64 = b.weights.iter().zip(&zeta).map(|(w, z)| w / z).sum();
            let lam1 = if last { 0.0 } else { lam0 - beta * (s1 - s0) };
            if last && (lam0 - beta * (m - s0)).abs() > 1e-9 {
                return Err(Error::Numerical(format!("final slope {beta} does not bring Λ = {lam0} to zero at s = m")));
            }
            let h1 = if last { f64::INFINITY } else { h0 - (lam1 / lam0).ln() / beta };
            b.pieces.push(Piece { s0, s1, h0, h1, lam0, shape: Shape::Linear { beta, zeta } });
            h0 = h1;
            lam0 = lam1;
            if last {
                b.l_max = b.pieces[j].h0 - (grid.lambda_floor / b.pieces[j].lam0).ln() / beta;
            }
        } else if !last {
            let mut panels = vec![(s0, h0)];
            let w = (s1 - s0) / grid.panels as f64;
            let mut h = h0;
            for p in 0..grid.panels {
                let a = s0 + w * p as f64;
                let e = if p + 1 == grid.panels { s1 } else { a + w };
                h += rule.integrate(a, e, |s| 1.0 / b.lambda_exact(s));
                panels.push((e, h));
            }
            let lam1 = b.lambda_exact(s1);
            b.pieces.push(Piece { s0, s1, h0, h1: h, lam0, shape: Shape::Curved { panels } });
            h0 = h;
            lam0 = lam1;
        } else {
            // graded panels towards s = m until Λ reaches the floor
            let mut panels = vec![(s0, h0)];
            let mut h = h0;
            let mut a = s0;
            let mut lam = lam0;
            while lam > grid.lambda_floor {
                let e = m - 0.5 * (m - a);
                if e <= a {
                    return Err(Error::Numerical("cannot resolve Λ near s = m".into()));
                }
                h += rule.integrate(a, e, |s| 1.0 / b.lambda_exact(s));
                panels.push((e, h));
                a = e;
                lam = b.lambda_exact(a);
            }
            b.pieces.push(Piece { s0, s1: a, h0, h1: h, lam0, shape: Shape::Curved { panels } });
            // beyond the cap: Λ vanishes linearly and ζ is frozen at its limit
            let beta = lam / (m - a);
            let zeta = b.rays.iter().map(PotentialFn::zeta_floor).collect();
            b.pieces.push(Piece {
                s0: a,
                s1: m,
                h0: h,
                h1: f64::INFINITY,
                lam0: lam,
                shape: Shape::Linear { beta, zeta },
            });
            b.l_max = h;
            b.truncated_mass = lam;
        }
    }
    b.certify()?;
    Ok(b)
}

impl Barrier {
    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.rays.iter().map(|r| r.id.clone()).collect()
    }

    pub fn potentials(&self) -> &[PotentialFn] {
        &self.rays
    }

    /// The centered spinning measure, indexed like the rays.
    pub fn kappa(&self) -> &SpinningMeasure {
        &self.kappa
    }

    /// `Λ(s)` straight from the tangent slopes.
    fn lambda_exact(&self, s: f64) -> f64 {
        self.rays.iter().zip(&self.weights).map(|(r, w)| w * r.phi(s)).sum()
    }

    fn piece_index(&self, s: f64) -> usize {
        self.pieces.partition_point(|p| p.s1 < s).min(self.pieces.len() - 1)
    }

    fn piece_index_l(&self, l: f64) -> usize {
        self.pieces.partition_point(|p| p.h1 < l).min(self.pieces.len() - 1)
    }

    /// `Λ(s)` on `[0, m]`.
    pub fn lambda(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 1.0;
        }
        if s >= self.m {
            return 0.0;
        }
        let p = &self.pieces[self.piece_index(s)];
        match &p.shape {
            Shape::Linear { .. } if p.h1.is_infinite() => p.lam0 * (self.m - s) / (self.m - p.s0),
            Shape::Linear { beta, .. } => p.lam0 - beta * (s - p.s0),
            Shape::Curved { .. } => self.lambda_exact(s),
        }
    }

    /// `H(s) = ∫_0^s du / Λ(u)`.
    pub fn h(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        if s >= self.m {
            return f64::INFINITY;
        }
        let p = &self.pieces[self.piece_index(s)];
        match &p.shape {
            Shape::Linear { beta, .. } => p.h0 - (self.lambda(s) / p.lam0).ln() / beta,
            Shape::Curved { panels } => {
                let k = panels.partition_point(|q| q.0 <= s).clamp(1, panels.len() - 1) - 1;
                let (a, ha) = panels[k];
                ha + GaussLegendre::eight().integrate(a, s, |u| 1.0 / self.lambda_exact(u))
            }
        }
    }

    /// `H⁻¹(l)`.
    pub fn h_inv(&self, l: f64) -> f64 {
        if l <= 0.0 {
            return 0.0;
        }
        if l.is_infinite() {
            return self.m;
        }
        let p = &self.pieces[self.piece_index_l(l)];
        match &p.shape {
            Shape::Linear { beta, .. } => {
                let lam = p.lam0 * (-beta * (l - p.h0)).exp();
                if p.h1.is_infinite() {
                    self.m - (self.m - p.s0) * lam / p.lam0
                } else {
                    (p.s0 + (p.lam0 - lam) / beta).min(p.s1)
                }
            }
            Shape::Curved { panels } => {
                let k = panels.partition_point(|q| q.1 <= l).clamp(1, panels.len() - 1) - 1;
                let ((mut lo, ha), (mut hi, _)) = (panels[k], panels[k + 1]);
                let rule = GaussLegendre::eight();
                let a = lo;
                let mut s = (lo + (l - ha) * self.lambda_exact(lo)).clamp(lo, hi);
                for _ in 0..100 {
                    let f = ha + rule.integrate(a, s, |u| 1.0 / self.lambda_exact(u)) - l;
                    if f > 0.0 {
                        hi = s;
                    } else {
                        lo = s;
                    }
                    let newton = s - f * self.lambda_exact(s);
                    let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
                    if (next - s).abs() <= 1e-15 * self.m || hi - lo <= 1e-15 * self.m {
                        s = next;
                        break;
                    }
                    s = next;
                }
                s
            }
        }
    }

    /// `ζ_γ(s)`, frozen on the tail beyond the tabulated range.
    pub fn zeta(&self, ray: usize, s: f64) -> f64 {
        if s <= 0.0 {
            return f64::INFINITY;
        }
        let p = &self.pieces[self.piece_index(s)];
        match &p.shape {
            Shape::Linear { zeta, .. } if p.h1.is_infinite() && self.truncated_mass > 0.0 => zeta[ray],
            _ => self.rays[ray].zeta(s),
        }
    }

    /// `a_γ(l) = (m_γ / m) ζ_γ(H⁻¹(l))`; infinite at `l = 0`.
    pub fn a(&self, ray: usize, l: f64) -> f64 {
        if l <= 0.0 {
            return f64::INFINITY;
        }
        let r = &self.rays[ray];
        let p = &self.pieces[self.piece_index_l(l)];
        let z = match &p.shape {
            Shape::Linear { zeta, .. } => zeta[ray],
            Shape::Curved { .. } => r.zeta(self.h_inv(l)),
        };
        r.m_gamma / self.m * z
    }

    /// `lim_{l→∞} a_γ(l)`.
    pub fn a_limit(&self, ray: usize) -> f64 {
        let r = &self.rays[ray];
        match &self.pieces.last().expect("non-empty").shape {
            Shape::Linear { zeta, .. } => r.m_gamma / self.m * zeta[ray],
            Shape::Curved { .. } => unreachable!("the final piece is affine"),
        }
    }

    /// Right-continuous inverse `b_γ(r) = inf { l : a_γ(l) <= r }`.
    pub fn b(&self, ray: usize, r: f64) -> f64 {
        let c = &self.rays[ray];
        let x = self.m * r / c.m_gamma;
        let p = c.partial_moment_right(x);
        if p <= 0.0 {
            return f64::INFINITY;
        }
        self.h((self.m - p).max(0.0))
    }

    /// `l`-values where some `a_γ` jumps or changes shape, in increasing order.
    pub fn l_breaks(&self) -> Vec<f64> {
        self.pieces.iter().skip(1).map(|p| p.h0).filter(|h| h.is_finite()).collect()
    }

    /// End of the range with non-trivial structure: beyond it every `a_γ` is
    /// constant (exactly, or up to `truncated_mass`).
    pub fn l_end(&self) -> f64 {
        self.pieces.last().map_or(0.0, |p| p.h0)
    }

    fn certify(&self) -> Result<()> {
        let mut prev_h = -1.0;
        let mut prev_lam = f64::INFINITY;
        for p in &self.pieces {
            let pts: Vec<(f64, f64)> = match &p.shape {
                Shape::Linear { .. } => vec![(p.s0, p.h0)],
                Shape::Curved { panels } => panels.clone(),
            };
            for (s, h) in pts {
                if h == prev_h {
                    // panel end repeated as the next piece's start
                    continue;
                }
                let lam = self.lambda_exact(s);
                if !(h > prev_h) || lam > prev_lam + 1e-12 || !(-1e-12..=1.0 + 1e-12).contains(&lam) {
                    return Err(Error::Numerical(format!(
                        "barrier grid not monotone at s = {s}: H = {h} after {prev_h}, Λ = {lam} after {prev_lam}"
                    )));
                }
                prev_h = h;
                prev_lam = lam;
            }
        }
        for (g, r) in self.rays.iter().enumerate() {
            let mut prev = f64::INFINITY;
            for p in &self.pieces {
                let z = match &p.shape {
                    Shape::Linear { zeta, .. } => zeta[g],
                    Shape::Curved { panels } => r.zeta(panels[panels.len() / 2].0),
                };
                if z > prev * (1.0 + 1e-12) {
                    return Err(Error::Numerical(format!("a on ray `{}` increases", r.id)));
                }
                prev = z;
            }
        }
        Ok(())
    }

    /// Writes `l, a_<id>..., lambda` on a uniform grid over `[0, l_hi]` plus
    /// both sides of every breakpoint.
    pub fn write_csv<W: Write>(&self, mut out: W, points: usize) -> io::Result<()> {
        let ids = self.ids();
        write!(out, "l")?;
        for id in &ids {
            write!(out, ",a_{id}")?;
        }
        writeln!(out, ",lambda")?;
        let hi = self.l_max.max(self.l_end() * 1.25).max(1.0);
        let mut ls: Vec<f64> = (0..=points).map(|i| hi * i as f64 / points as f64).collect();
        for b in self.l_breaks() {
            ls.push(b);
            ls.push(b * (1.0 + 1e-9));
        }
        ls.sort_by(f64::total_cmp);
        ls.dedup();
        for l in ls {
            write!(out, "{l}")?;
            for g in 0..ids.len() {
                write!(out, ",{}", self.a(g, l))?;
            }
            writeln!(out, ",{}", self.lambda(self.h_inv(l)))?;
        }
        Ok(())
    }
}

impl BarrierLevels for Barrier {
    fn level(&self, ray: usize, l: f64) -> f64 {
        self.a(ray, l)
    }
}

/// `P[L_τ >= H(s)] = Λ(s)`.
pub fn local_time_survival(barrier: &Barrier, s: f64) -> Result<f64> {
    if !(s >= 0.0 && s < barrier.m) {
        return Err(Error::InvalidArgument(format!("survival needs 0 <= s < m = {}, got {s}", barrier.m)));
    }
    Ok(barrier.lambda(s))
}

/// The barrier stopping rule; run it with `barrier.kappa()`.
pub fn vallois_rule(barrier: Arc<Barrier>) -> StoppingRule {
    StoppingRule::Barrier(barrier)
}

/// Convex costs of the local time with `Ψ'(∞) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvexCost {
    /// `Ψ(x) = x + e^{-x}`.
    Exp,
    /// `Ψ(x) = sqrt(1 + x²)`.
    Sqrt,
}

impl ConvexCost {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "exp" => Ok(Self::Exp),
            "sqrt" => Ok(Self::Sqrt),
            other => Err(Error::InvalidArgument(format!("unknown cost `{other}`; expected exp or sqrt"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Exp => "exp",
            Self::Sqrt => "sqrt",
        }
    }

    pub fn psi(&self, x: f64) -> f64 {
        match self {
            Self::Exp => x + (-x).exp(),
            Self::Sqrt => (1.0 + x * x).sqrt(),
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        match self {
            Self::Exp => 1.0 - (-x).exp(),
            Self::Sqrt => x / (1.0 + x * x).sqrt(),
        }
    }

    pub fn d2(&self, x: f64) -> f64 {
        match self {
            Self::Exp => (-x).exp(),
            Self::Sqrt => (1.0 + x * x).powf(-1.5),
        }
    }

    /// `Ψ'(∞)`, also the bound `K` on `Ψ'`.
    pub fn d1_inf(&self) -> f64 {
        1.0
    }

    /// `Ψ'(∞) - Ψ'(x)` without cancellation.
    fn d1_gap(&self, x: f64) -> f64 {
        match self {
            Self::Exp => (-x).exp(),
            Self::Sqrt => {
                let q = (1.0 + x * x).sqrt();
                1.0 / (q * (q + x))
            }
        }
    }

    /// `∫_0^∞ e^{-δt} Ψ''(u + t) dt`.
    pub fn tail1(&self, delta: f64, u: f64) -> f64 {
        match self {
            Self::Exp => (-u).exp() / (1.0 + delta),
            Self::Sqrt => integrate_exp_weighted(delta, |t| self.d2(u + t)),
        }
    }

    /// `∫_0^∞ e^{-δt} (Ψ'(∞) - Ψ'(u + t)) dt`.
    pub fn tail2(&self, delta: f64, u: f64) -> f64 {
        match self {
            Self::Exp => (-u).exp() / (1.0 + delta),
            Self::Sqrt => integrate_exp_weighted(delta, |t| self.d1_gap(u + t)),
        }
    }
}

impl crate::stats::Cost for ConvexCost {
    fn value(&self, x: f64) -> f64 {
        self.psi(x)
    }
}

/// Interpolation points on each cell: both ends and the eight Gauss nodes.
struct CellBasis {
    t: Vec<f64>,
    bary: Vec<f64>,
    /// `spec[k][i] = ∫_0^{θ_k} ℓ_i`, `ℓ_i` the Lagrange basis on the nodes.
    spec: Vec<Vec<f64>>,
}

impl CellBasis {
    fn new() -> Self {
        let gl = GaussLegendre::eight();
        let mut t = vec![0.0];
        t.extend_from_slice(&gl.nodes);
        t.push(1.0);
        let bary: Vec<f64> = (0..t.len())
            .map(|j| 1.0 / (0..t.len()).filter(|&k| k != j).map(|k| t[j] - t[k]).product::<f64>())
            .collect();
        let lagrange = |i: usize, x: f64| -> f64 {
            let nodes = &gl.nodes;
            (0..nodes.len()).filter(|&k| k != i).map(|k| (x - nodes[k]) / (nodes[i] - nodes[k])).product()
        };
        let spec = gl
            .nodes
            .iter()
            .map(|&theta| (0..gl.len()).map(|i| gl.integrate(0.0, theta, |x| lagrange(i, x))).collect())
            .collect();
        Self { t, bary, spec }
    }

    /// Barycentric interpolation of `values` (at `self.t`) at `x ∈ [0, 1]`.
    fn eval(&self, values: &[f64], x: f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for ((&t, &w), &v) in self.t.iter().zip(&self.bary).zip(values) {
            let d = x - t;
            if d == 0.0 {
                return v;
            }
            num += w / d * v;
            den += w / d;
        }
        num / den
    }
}

/// Values on one cell at the interpolation points.
#[derive(Debug, Clone)]
struct Cell {
    l0: f64,
    l1: f64,
    delta: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    k2: Vec<f64>,
    a: Vec<Vec<f64>>,
}

/// Dual pair `(G, M)` for the barrier rule and a convex cost.
pub struct DualCertificate {
    barrier: Arc<Barrier>,
    pub cost: ConvexCost,
    kappa: Vec<f64>,
    basis: CellBasis,
    cells: Vec<Cell>,
    l_end: f64,
    delta_end: f64,
    k_end: f64,
    k2_end: f64,
    /// `Δ'` beyond `l_end`.
    pub tail_rate: f64,
    a_inf: Vec<f64>,
    tail: TailTable,
}

/// `T1`, `T2` tabulated beyond `l_end` for costs without closed forms.
struct TailTable {
    u0: f64,
    step: f64,
    t1: Vec<f64>,
    t2: Vec<f64>,
}

const TAIL_STEP: f64 = 0.01;
const TAIL_SPAN: f64 = 60.0;
const CELL_WIDTH: f64 = 0.05;

impl DualCertificate {
    fn t12(&self, u: f64) -> (f64, f64) {
        if self.cost == ConvexCost::Exp {
            let v = self.cost.tail1(self.tail_rate, u);
            return (v, v);
        }
        let x = (u - self.tail.u0) / self.tail.step;
        let i = x.floor() as usize;
        if i + 1 >= self.tail.t1.len() {
            return (self.cost.tail1(self.tail_rate, u), self.cost.tail2(self.tail_rate, u));
        }
        // cubic Hermite: T1' = δT1 - Ψ'', T2' = -T1
        let h = self.tail.step;
        let f = x - i as f64;
        let (u0, u1) = (self.tail.u0 + h * i as f64, self.tail.u0 + h * (i + 1) as f64);
        let d = self.tail_rate;
        let herm = |y0: f64, y1: f64, d0: f64, d1: f64| {
            let (f2, f3) = (f * f, f * f * f);
            (2.0 * f3 - 3.0 * f2 + 1.0) * y0
                + (f3 - 2.0 * f2 + f) * h * d0
                + (-2.0 * f3 + 3.0 * f2) * y1
                + (f3 - f2) * h * d1
        };
        let (a0, a1) = (self.tail.t1[i], self.tail.t1[i + 1]);
        let t1 = herm(a0, a1, d * a0 - self.cost.d2(u0), d * a1 - self.cost.d2(u1));
        let t2 = herm(self.tail.t2[i], self.tail.t2[i + 1], -a0, -a1);
        (t1, t2)
    }

    fn cell_at(&self, l: f64) -> Option<(&Cell, f64)> {
        if l > self.l_end || self.cells.is_empty() {
            return None;
        }
        let i = self.cells.partition_point(|c| c.l1 < l).min(self.cells.len() - 1);
        let c = &self.cells[i];
        Some((c, ((l - c.l0) / (c.l1 - c.l0)).clamp(0.0, 1.0)))
    }

    /// `Δ(l) = ∫_0^l Σ κ_γ / a_γ`.
    pub fn delta(&self, l: f64) -> f64 {
        match self.cell_at(l) {
            Some((c, x)) => self.basis.eval(&c.delta, x),
            None => self.delta_end + self.tail_rate * (l - self.l_end),
        }
    }

    /// `Q(l) = e^{Δ(l)} ∫_l^∞ e^{-Δ} Ψ''`.
    pub fn q(&self, l: f64) -> f64 {
        match self.cell_at(l) {
            Some((c, x)) => self.basis.eval(&c.q, x),
            None => self.t12(l).0,
        }
    }

    /// `A_γ(l)`.
    pub fn a_coef(&self, ray: usize, l: f64) -> f64 {
        if l.is_infinite() {
            return self.cost.d1_inf();
        }
        match self.cell_at(l) {
            Some((c, x)) => self.basis.eval(&c.a[ray], x),
            None => self.cost.d1_inf() - self.t12(l).1 / self.a_inf[ray],
        }
    }

    /// `K(l) = ∫_0^l Q`.
    pub fn k(&self, l: f64) -> f64 {
        match self.cell_at(l) {
            Some((c, x)) => self.basis.eval(&c.k, x),
            None => self.k_end + self.t12(self.l_end).1 - self.t12(l).1,
        }
    }

    /// `K(∞)`.
    pub fn k_inf(&self) -> f64 {
        self.k_end + self.t12(self.l_end).1
    }

    /// `∫_0^l Σ κ_γ A_γ`. Beyond the tabulated range it is continued through
    /// `Σ κ_γ A_γ = Ψ' + Q`.
    pub fn k2(&self, l: f64) -> f64 {
        match self.cell_at(l) {
            Some((c, x)) => self.basis.eval(&c.k2, x),
            None => self.k2_end + self.cost.psi(l) - self.cost.psi(self.l_end) + self.k(l) - self.k_end,
        }
    }

    /// `G(γ, r)`, concave in `r`; the infimum over `l` sits at `b_γ(r)`.
    pub fn g(&self, ray: usize, r: f64) -> f64 {
        if r <= 0.0 {
            return self.cost.psi(0.0) - self.k_inf();
        }
        let b = self.barrier.b(ray, r);
        if b.is_infinite() {
            return r * self.cost.d1_inf() + self.cost.psi(0.0) - self.k_inf();
        }
        r * self.a_coef(ray, b) + self.cost.psi(0.0) - self.k(b)
    }

    /// `M = ∫_0^L Σ κ A − A_Γ(L) R` at one state.
    pub fn m_value(&self, ray: usize, r: f64, l: f64) -> f64 {
        self.k2(l) - self.a_coef(ray, l) * r
    }

    pub fn barrier(&self) -> &Barrier {
        &self.barrier
    }

    pub fn l_end(&self) -> f64 {
        self.l_end
    }

    /// Writes `l, delta, A_<id>...` over `[0, l_hi]`.
    pub fn write_coefficients_csv<W: Write>(&self, mut out: W, l_hi: f64, points: usize) -> io::Result<()> {
        let ids = self.barrier.ids();
        write!(out, "l,delta")?;
        for id in &ids {
            write!(out, ",A_{id}")?;
        }
        writeln!(out)?;
        for i in 0..=points {
            let l = l_hi * i as f64 / points as f64;
            write!(out, "{l},{}", self.delta(l))?;
            for g in 0..ids.len() {
                write!(out, ",{}", self.a_coef(g, l))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Writes `r, G_<id>...` over `[0, r_hi]`.
    pub fn write_g_csv<W: Write>(&self, mut out: W, r_hi: f64, points: usize) -> io::Result<()> {
        let ids = self.barrier.ids();
        write!(out, "r")?;
        for id in &ids {
            write!(out, ",G_{id}")?;
        }
        writeln!(out)?;
        for i in 0..=points {
            let r = r_hi * i as f64 / points as f64;
            write!(out, "{r}")?;
            for g in 0..ids.len() {
                write!(out, ",{}", self.g(g, r))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Builds `Δ`, `A_γ`, `G` and `M` for the barrier and cost.
pub fn dual_certificate(barrier: Arc<Barrier>, cost: ConvexCost) -> Result<DualCertificate> {
    let n = barrier.len();
    let kappa = barrier.kappa().probs().to_vec();
    let a_inf: Vec<f64> = (0..n).map(|g| barrier.a_limit(g)).collect();
    if let Some(g) = (0..n).find(|&g| kappa[g] > 0.0 && !(a_inf[g] > 0.0)) {
        return Err(Error::Unsupported(format!(
            "barrier on ray `{}` tends to zero; the dual tail is degenerate",
            barrier.rays[g].id
        )));
    }
    let tail_rate: f64 = kappa.iter().zip(&a_inf).map(|(k, a)| k / a).sum();
    let l_end = barrier.l_end();

    // cell edges: breakpoints subdivided to width <= CELL_WIDTH
    let mut edges = vec![0.0];
    let mut marks = barrier.l_breaks();
    marks.retain(|&b| b > 0.0 && b < l_end);
    marks.push(l_end);
    for b in marks {
        let last = *edges.last().expect("non-empty");
        if b <= last {
            continue;
        }
        let parts = ((b - last) / CELL_WIDTH).ceil().max(1.0) as usize;
        for p in 1..=parts {
            edges.push(if p == parts { b } else { last + (b - last) * p as f64 / parts as f64 });
        }
    }
    if l_end <= 0.0 {
        edges.clear();
    }

    let basis = CellBasis::new();
    let gl = GaussLegendre::eight();
    let nn = gl.len();
    let mut cells: Vec<Cell> = Vec::with_capacity(edges.len().saturating_sub(1));
    // node-local quantities kept for the backward and forward passes
    let mut inv_a: Vec<Vec<Vec<f64>>> = Vec::new();

    // forward: Δ
    let mut d0 = 0.0;
    for w in edges.windows(2) {
        let (l0, l1) = (w[0], w[1]);
        let h = l1 - l0;
        let nodes: Vec<f64> = gl.nodes.iter().map(|t| l0 + h * t).collect();
        let ia: Vec<Vec<f64>> = (0..n).map(|g| nodes.iter().map(|&l| 1.0 / barrier.a(g, l)).collect()).collect();
        let rate: Vec<f64> = (0..nn).map(|i| (0..n).map(|g| kappa[g] * ia[g][i]).sum()).collect();
        let mut delta = vec![d0];
        for k in 0..nn {
            delta.push(d0 + h * (0..nn).map(|i| basis.spec[k][i] * rate[i]).sum::<f64>());
        }
        let d1 = d0 + h * (0..nn).map(|i| gl.weights[i] * rate[i]).sum::<f64>();
        delta.push(d1);
        cells.push(Cell { l0, l1, delta, q: vec![], k: vec![], k2: vec![], a: vec![] });
        inv_a.push(ia);
        d0 = d1;
    }
    let delta_end = d0;

    let mut cert = DualCertificate {
        barrier: barrier.clone(),
        cost,
        kappa,
        basis,
        cells: Vec::new(),
        l_end,
        delta_end,
        k_end: 0.0,
        k2_end: 0.0,
        tail_rate,
        a_inf,
        tail: TailTable { u0: l_end, step: TAIL_STEP, t1: vec![], t2: vec![] },
    };
    if cost != ConvexCost::Exp {
        let count = (TAIL_SPAN / TAIL_STEP) as usize + 1;
        let us: Vec<f64> = (0..count).map(|i| l_end + TAIL_STEP * i as f64).collect();
        cert.tail.t1 = us.iter().map(|&u| cost.tail1(tail_rate, u)).collect();
        cert.tail.t2 = us.iter().map(|&u| cost.tail2(tail_rate, u)).collect();
    }

    // backward: J, Q and A_γ
    let (t1_end, t2_end) = cert.t12(l_end);
    let mut j1 = (-delta_end).exp() * t1_end;
    let mut a1: Vec<f64> = (0..n).map(|g| cost.d1_inf() - t2_end / cert.a_inf[g]).collect();
    for (c, ia) in cells.iter_mut().zip(&inv_a).rev() {
        let h = c.l1 - c.l0;
        let nodes: Vec<f64> = gl.nodes.iter().map(|t| c.l0 + h * t).collect();
        let gvals: Vec<f64> = (0..nn).map(|i| (-c.delta[i + 1]).exp() * cost.d2(nodes[i])).collect();
        let mut jv = vec![0.0; nn + 2];
        jv[nn + 1] = j1;
        for k in 0..nn {
            jv[k + 1] =
                j1 + h * (0..nn).map(|i| (gl.weights[i] - basis_spec(&cert.basis, k, i)) * gvals[i]).sum::<f64>();
        }
        jv[0] = j1 + h * (0..nn).map(|i| gl.weights[i] * gvals[i]).sum::<f64>();
        c.q = jv.iter().zip(&c.delta).map(|(j, d)| d.exp() * j).collect();
        let qn = &c.q[1..=nn];
        c.a = (0..n)
            .map(|g| {
                let f: Vec<f64> = (0..nn).map(|i| qn[i] * ia[g][i]).collect();
                let mut av = vec![0.0; nn + 2];
                av[nn + 1] = a1[g];
                for k in 0..nn {
                    av[k + 1] = a1[g]
                        - h * (0..nn).map(|i| (gl.weights[i] - basis_spec(&cert.basis, k, i)) * f[i]).sum::<f64>();
                }
                av[0] = a1[g] - h * (0..nn).map(|i| gl.weights[i] * f[i]).sum::<f64>();
                av
            })
            .collect();
        j1 = jv[0];
        a1 = c.a.iter().map(|a| a[0]).collect();
    }

    // forward: K and K2
    let (mut k0, mut k20) = (0.0, 0.0);
    for c in cells.iter_mut() {
        let h = c.l1 - c.l0;
        let qn: Vec<f64> = c.q[1..=nn].to_vec();
        let sa: Vec<f64> = (0..nn).map(|i| (0..n).map(|g| cert.kappa[g] * c.a[g][i + 1]).sum()).collect();
        let fwd = |v0: f64, f: &[f64]| -> Vec<f64> {
            let mut out = vec![v0];
            for k in 0..nn {
                out.push(v0 + h * (0..nn).map(|i| basis_spec(&cert.basis, k, i) * f[i]).sum::<f64>());
            }
            out.push(v0 + h * (0..nn).map(|i| gl.weights[i] * f[i]).sum::<f64>());
            out
        };
        c.k = fwd(k0, &qn);
        c.k2 = fwd(k20, &sa);
        k0 = c.k[nn + 1];
        k20 = c.k2[nn + 1];
    }
    cert.k_end = k0;
    cert.k2_end = k20;
    cert.cells = cells;
    Ok(cert)
}

fn basis_spec(b: &CellBasis, k: usize, i: usize) -> f64 {
    b.spec[k][i]
}

/// `M_t` along a path.
pub fn dual_m(path: &WalshPath, cert: &DualCertificate) -> Vec<f64> {
    (0..path.len()).map(|i| cert.m_value(path.ray[i], path.r[i], path.l[i])).collect()
}

/// Pathwise inequality diagnostics for one stopped path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    /// `max_t M_t + G(Z_t) − Ψ(L_t)` over the skeleton.
    pub max_gap: f64,
    /// The same quantity at the detection step, using the skeleton radius.
    pub stop_gap_skeleton: f64,
    /// The same quantity at the stop, with the radius placed on the barrier.
    pub stop_gap_exact: f64,
}

pub fn gap_at(cert: &DualCertificate, ray: usize, r: f64, l: f64) -> f64 {
    cert.m_value(ray, r, l) + cert.g(ray, r) - cert.cost.psi(l)
}

pub fn pathwise_gap(path: &WalshPath, stop: &StoppedSample, cert: &DualCertificate) -> GapReport {
    let max_gap =
        (0..path.len()).map(|i| gap_at(cert, path.ray[i], path.r[i], path.l[i])).fold(f64::NEG_INFINITY, f64::max);
    let last = path.len() - 1;
    GapReport {
        max_gap,
        stop_gap_skeleton: gap_at(cert, path.ray[last], path.r[last], path.l[last]),
        stop_gap_exact: gap_at(cert, stop.ray, stop.radius, stop.local_time),
    }
}

/// One row of the uniform-integrability diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct UiRow {
    pub x: f64,
    /// Estimate of `x P[τ > H_x]`.
    pub estimate: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct UiTable {
    pub rows: Vec<UiRow>,
    /// Whether `|estimate|` is non-increasing in `|x|` within 3 standard errors.
    pub non_increasing: bool,
}

/// Estimates `x P[τ > H_x]`, where `H_x` is the first time
/// `h_{A,Aᶜ}(Z) = x`: radius `x / κ(A)` on a ray outside `A` for `x > 0`, and
/// radius `|x| / κ(Aᶜ)` on a ray in `A` for `x < 0`. Uses the per-ray peaks
/// recorded before each stop.
pub fn ui_diagnostic(
    samples: &[StoppedSample],
    kappa: &SpinningMeasure,
    in_a: &[bool],
    x_grid: &[f64],
) -> Result<UiTable> {
    let ka = h_weight(in_a, kappa)?;
    let n = samples.len() as f64;
    let rows: Vec<UiRow> = x_grid
        .iter()
        .map(|&x| {
            if x == 0.0 {
                return UiRow { x, estimate: 0.0, std_err: 0.0 };
            }
            let (level, side) = if x > 0.0 { (x / ka, false) } else { (-x / (1.0 - ka), true) };
            let hits =
                samples.iter().filter(|s| s.peaks.iter().zip(in_a).any(|(&p, &a)| a == side && p >= level)).count()
                    as f64;
            let p = hits / n;
            UiRow { x, estimate: x * p, std_err: x.abs() * (p * (1.0 - p) / n).sqrt() }
        })
        .collect();
    let mut order: Vec<&UiRow> = rows.iter().collect();
    order.sort_by(|a, b| a.x.abs().total_cmp(&b.x.abs()));
    let non_increasing = order.windows(2).all(|w| {
        let slack = 3.0 * (w[0].std_err.powi(2) + w[1].std_err.powi(2)).sqrt();
        w[1].estimate.abs() <= w[0].estimate.abs() + slack
    });
    Ok(UiTable { rows, non_increasing })
}

/// Expected number of excursions that reach the level of `H_x` before the
/// barrier stops, times `x`; an upper bound for `x P[τ > H_x]`:
/// `κ(A) Σ_{γ∉A} κ_γ Leb{u : ζ_γ(u) >= m y / m_γ}` with `y = x / κ(A)`
/// (mirrored for `x < 0`).
pub fn ui_count_bound(barrier: &Barrier, in_a: &[bool], x: f64) -> Result<f64> {
    let kappa = barrier.kappa();
    let ka = h_weight(in_a, kappa)?;
    if x == 0.0 {
        return Ok(0.0);
    }
    let (level, side, factor) = if x > 0.0 { (x / ka, false, ka) } else { (-x / (1.0 - ka), true, 1.0 - ka) };
    let m = barrier.m;
    let total: f64 = barrier
        .rays
        .iter()
        .zip(kappa.probs())
        .zip(in_a)
        .filter(|(_, &a)| a == side)
        .map(|((r, &k), _)| {
            // ζ_γ(u) >= y' ⇔ P(y') <= m − u, so the set is (0, m − P(y')]
            let y = m * level / r.m_gamma;
            k * (m - r.partial_moment(y)).max(0.0)
        })
        .sum();
    Ok(factor * total)
}
