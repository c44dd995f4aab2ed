//! The `2 + 2` case (`s₃ = 0`): one degree of freedom `(r₁, ψ₁)` with
//! Hamiltonian `H = ½√P(r₁) cos ψ₁ + w₂(r₁)`, where
//! `P(r₁) = (s₁² − r₁²)(s₂² − (r − r₁)²)`, solved by inverting the time
//! integral `t = ∫ 2 dρ / √w₄(ρ)` with `w₄ = P − 4(H − w₂)²`.
//!
//! The equations of motion are the canonical ones for `{r₁, ψ₁} = 1`:
//! `ṙ₁ = −½√P sin ψ₁`, `ψ̇₁ = −(P′/(4√P)) cos ψ₁ − w₂′(r₁)`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::flow::Trajectory;
use crate::linalg::SystemParams;
use crate::quad::integrate_adaptive;
use crate::reduction23::unwrap_near;

/// Relative tolerance of the time quadrature.
pub const TIME_QUAD_TOL: f64 = 1e-13;

/// `|w₄′| below this at a root marks a double root.
pub const DOUBLE_ROOT_TOL: f64 = 1e-8;

/// Leaf radii, the level `r = r₁ + r₂` and the parameters entering `w₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leaf22 {
    pub s1: f64,
    pub s2: f64,
    pub r: f64,
    pub a1: f64,
    pub a2: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Leaf22 {
    pub fn new(s1: f64, s2: f64, r: f64, a1: f64, a2: f64, d1: f64, d2: f64) -> Result<Self> {
        let all = [s1, s2, r, a1, a2, d1, d2];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("non-finite leaf parameter".into()));
        }
        if !(s1 > 0.0 && s2 > 0.0) {
            return Err(Error::Validation(format!("radii must be positive, got s1 = {s1}, s2 = {s2}")));
        }
        if r.abs() > s1 + s2 {
            return Err(Error::Domain(format!("level r = {r} is empty for s1 + s2 = {}", s1 + s2)));
        }
        Ok(Self { s1, s2, r, a1, a2, d1, d2 })
    }

    /// Uses `a₁, a₂` and the first two entries of `d`.
    pub fn from_params(params: &SystemParams, s1: f64, s2: f64, r: f64) -> Result<Self> {
        if params.n_plus() != 2 || params.n_minus() < 2 {
            return Err(Error::Dimension(format!(
                "the 2+2 reduction needs n+ = 2 and n- >= 2, got {} and {}",
                params.n_plus(),
                params.n_minus()
            )));
        }
        Self::new(s1, s2, r, params.a[0], params.a[1], params.d[0], params.d[1])
    }

    /// Range of `r₁` allowed by `|r₁| ≤ s₁` and `|r − r₁| ≤ s₂`.
    pub fn r1_range(&self) -> (f64, f64) {
        ((-self.s1).max(self.r - self.s2), self.s1.min(self.r + self.s2))
    }

    pub fn p(&self, r1: f64) -> f64 {
        (self.s1 * self.s1 - r1 * r1) * (self.s2 * self.s2 - (self.r - r1).powi(2))
    }

    fn p_prime(&self, r1: f64) -> f64 {
        let r2 = self.r - r1;
        -2.0 * r1 * (self.s2 * self.s2 - r2 * r2) + 2.0 * (self.s1 * self.s1 - r1 * r1) * r2
    }

    /// Coefficient of `r₁` in `w₂` beyond `r/2`: `½(a₁−a₂)(d₁−d₂)`.
    fn k1(&self) -> f64 {
        0.5 * (self.a1 - self.a2) * (self.d1 - self.d2)
    }

    pub fn w2(&self, r1: f64) -> f64 {
        let (s1, s2, r) = (self.s1, self.s2, self.r);
        -0.25 * (r1 * r1 + (r - r1).powi(2)) + 0.25 * (s1 * s1 + s2 * s2) + 0.25 * r * r
            + 0.5 * (self.a1 - self.a2) * (self.d1 * r1 + self.d2 * (r - r1))
            + 0.25 * (s1 + s2).powi(2)
            + 0.5 * (self.a1 + self.a2) * (self.d1 * s1 + self.d2 * s2)
    }

    pub fn w2_prime(&self, r1: f64) -> f64 {
        -r1 + 0.5 * self.r + self.k1()
    }

    /// `H(r₁, ψ₁) = ½√P cos ψ₁ + w₂(r₁)`.
    pub fn hamiltonian(&self, r1: f64, psi1: f64) -> Result<f64> {
        let p = self.p(r1);
        if p < -1e-12 * (self.s1 * self.s2).powi(2) {
            return Err(Error::Domain(format!("r1 = {r1} outside the leaf")));
        }
        Ok(0.5 * p.max(0.0).sqrt() * psi1.cos() + self.w2(r1))
    }

    /// `(ṙ₁, ψ̇₁)`.
    pub fn vector_field(&self, r1: f64, psi1: f64) -> Result<(f64, f64)> {
        let p = self.p(r1);
        if !(p > 0.0) {
            return Err(Error::Domain(format!("r1 = {r1} at a pole of the leaf")));
        }
        let root = p.sqrt();
        let rdot = -0.5 * root * psi1.sin();
        let psidot = -(self.p_prime(r1) / (4.0 * root)) * psi1.cos() - self.w2_prime(r1);
        Ok((rdot, psidot))
    }

    /// `w₄(r₁)` from its definition.
    pub fn w4_direct(&self, r1: f64, h: f64) -> f64 {
        self.p(r1) - 4.0 * (h - self.w2(r1)).powi(2)
    }
}

/// Integrator right-hand side on `(r₁, ψ₁)`.
pub fn field22(leaf: Leaf22) -> impl Fn(f64, &[f64], &mut [f64]) -> Result<()> + Clone {
    move |_t, y, out| {
        let (a, b) = leaf.vector_field(y[0], y[1])?;
        out[0] = a;
        out[1] = b;
        Ok(())
    }
}

fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * x + a)
}

fn poly_deriv(c: &[f64]) -> Vec<f64> {
    c.iter().enumerate().skip(1).map(|(i, &a)| i as f64 * a).collect()
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Quotient of `c` by `(x − root)`, remainder dropped.
fn poly_deflate(c: &[f64], root: f64) -> Vec<f64> {
    let n = c.len() - 1;
    let mut q = vec![0.0; n];
    let mut carry = 0.0;
    for i in (0..n).rev() {
        carry = c[i + 1] + carry * root;
        q[i] = carry;
    }
    q
}

fn trimmed(c: &[f64]) -> &[f64] {
    let mut n = c.len();
    while n > 1 && c[n - 1] == 0.0 {
        n -= 1;
    }
    &c[..n]
}

/// Real roots of a real polynomial (ascending coefficients), sorted and polished.
pub fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let c = trimmed(coeffs);
    let deg = c.len() - 1;
    if deg == 0 {
        return Vec::new();
    }
    let lead = c[deg];
    let candidates: Vec<f64> = if deg == 1 {
        vec![-c[0] / c[1]]
    } else {
        let comp = DMatrix::<f64>::from_fn(deg, deg, |i, j| {
            if i == 0 {
                -c[deg - 1 - j] / lead
            } else if j + 1 == i {
                1.0
            } else {
                0.0
            }
        });
        comp.complex_eigenvalues()
            .iter()
            .filter(|z| z.im.abs() <= 1e-6 * z.re.abs().max(1.0))
            .map(|z| z.re)
            .collect()
    };
    let dc = poly_deriv(c);
    let scale = c.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut roots: Vec<f64> = candidates
        .into_iter()
        .map(|mut x| {
            for _ in 0..50 {
                let f = poly_eval(c, x);
                let d = poly_eval(&dc, x);
                if f.abs() <= 1e-15 * scale || d == 0.0 {
                    break;
                }
                let step = f / d;
                let next = x - step;
                // Keep the better of the two; near double roots Newton may stall.
                if poly_eval(c, next).abs() >= f.abs() {
                    break;
                }
                x = next;
                if step.abs() <= 1e-16 * x.abs().max(1.0) {
                    break;
                }
            }
            x
        })
        .collect();
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-7 * a.abs().max(1.0));
    roots
}

/// A maximal interval `[ρ₋, ρ₊]` between adjacent real roots of `w₄` on which `w₄ > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionInterval {
    pub lo: f64,
    pub hi: f64,
    /// `q(u) = w₄(u) / ((u − ρ₋)(ρ₊ − u))`, ascending coefficients.
    q: Vec<f64>,
    /// Full period `T = ∮ 2 dρ / √w₄`.
    pub period: f64,
}

impl MotionInterval {
    fn new(lo: f64, hi: f64, w4: &[f64]) -> Result<Self> {
        let q: Vec<f64> = poly_deflate(&poly_deflate(trimmed(w4), lo), hi).iter().map(|x| -x).collect();
        let mut out = Self { lo, hi, q, period: 0.0 };
        out.period = 2.0 * out.phase_of_theta(FRAC_PI_2)?;
        Ok(out)
    }

    fn integrand(&self, theta: f64) -> Result<f64> {
        let u = self.lo + (self.hi - self.lo) * theta.sin().powi(2);
        let q = poly_eval(&self.q, u);
        if !(q > 0.0) {
            return Err(Error::Numerical(format!("w4 has an extra root inside [{}, {}]", self.lo, self.hi)));
        }
        Ok(4.0 / q.sqrt())
    }

    /// Time from `ρ₋` to the point with angle `θ`, `ρ = ρ₋ + (ρ₊ − ρ₋) sin²θ`.
    fn phase_of_theta(&self, theta: f64) -> Result<f64> {
        if theta == 0.0 {
            return Ok(0.0);
        }
        integrate_adaptive(|x| self.integrand(x), 0.0, theta, 1, TIME_QUAD_TOL)
    }

    fn theta_of(&self, r1: f64) -> Result<f64> {
        let width = self.hi - self.lo;
        let slack = 1e-12 * self.hi.abs().max(self.lo.abs()).max(1.0);
        if r1 < self.lo - slack || r1 > self.hi + slack {
            return Err(Error::Domain(format!(
                "r1 = {r1} outside the motion interval [{}, {}]",
                self.lo, self.hi
            )));
        }
        let x = ((r1 - self.lo) / width).clamp(0.0, 1.0);
        Ok(x.sqrt().asin())
    }

    fn r1_of_theta(&self, theta: f64) -> f64 {
        self.lo + (self.hi - self.lo) * theta.sin().powi(2)
    }

    /// Time needed to go from `ρ₋` up to `r₁`.
    pub fn rise_time(&self, r1: f64) -> Result<f64> {
        self.phase_of_theta(self.theta_of(r1)?)
    }

    /// `r₁` reached a time `tau ∈ [0, T/2]` after leaving `ρ₋`.
    pub fn r1_after_rise(&self, tau: f64) -> Result<f64> {
        let half = 0.5 * self.period;
        let tau = tau.clamp(0.0, half);
        let (mut lo, mut hi) = (0.0, FRAC_PI_2);
        let mut theta = FRAC_PI_2 * tau / half;
        for _ in 0..100 {
            let f = self.phase_of_theta(theta)? - tau;
            if f.abs() <= 1e-13 * self.period.max(1.0) {
                break;
            }
            if f > 0.0 {
                hi = theta;
            } else {
                lo = theta;
            }
            let next = theta - f / self.integrand(theta)?;
            theta = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
            if hi - lo <= 1e-15 {
                break;
            }
        }
        Ok(self.r1_of_theta(theta))
    }

    /// Phase in `[0, T)` of `r₁` moving in direction `sign`.
    pub fn phase_of(&self, r1: f64, sign: f64) -> Result<f64> {
        let rise = self.rise_time(r1)?;
        Ok(if sign >= 0.0 { rise } else { (self.period - rise) % self.period })
    }

    /// `(r₁, direction)` at phase `phase` (any real; reduced modulo `T`).
    pub fn at_phase(&self, phase: f64) -> Result<(f64, f64)> {
        let p = phase.rem_euclid(self.period);
        let half = 0.5 * self.period;
        if p <= half {
            Ok((self.r1_after_rise(p)?, 1.0))
        } else {
            Ok((self.r1_after_rise(self.period - p)?, -1.0))
        }
    }
}

/// `w₄` on one energy level with its real roots and motion intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct QuarticData {
    pub h: f64,
    /// Ascending coefficients of `w₄`; the quartic coefficient cancels identically.
    pub coeffs: [f64; 5],
    /// Real roots in ascending order.
    pub roots: Vec<f64>,
    /// Double roots inside the leaf (equilibria of the reduced flow).
    pub double_roots: Vec<f64>,
    pub intervals: Vec<MotionInterval>,
    pub leaf: Leaf22,
}

impl QuarticData {
    pub fn w4(&self, r1: f64) -> f64 {
        poly_eval(&self.coeffs, r1)
    }

    /// Motion interval whose closure contains `r1`.
    pub fn interval_containing(&self, r1: f64) -> Option<&MotionInterval> {
        let slack = 1e-9 * r1.abs().max(1.0);
        self.intervals.iter().find(|iv| r1 >= iv.lo - slack && r1 <= iv.hi + slack)
    }

    pub fn equilibrium_near(&self, r1: f64) -> Option<f64> {
        let slack = 1e-7 * r1.abs().max(1.0);
        self.double_roots.iter().copied().find(|x| (x - r1).abs() <= slack)
    }
}

/// `w₂(r₁)`.
pub fn w2(r1: f64, leaf: &Leaf22) -> f64 {
    leaf.w2(r1)
}

/// Expands `w₄` for energy `h`, finds its real roots and motion intervals.
pub fn build_quartic(leaf: &Leaf22, h: f64) -> Result<QuarticData> {
    let (s1, s2, r) = (leaf.s1, leaf.s2, leaf.r);
    let p = poly_mul(&[s1 * s1, 0.0, -1.0], &[s2 * s2 - r * r, 2.0 * r, -1.0]);
    let k1 = leaf.k1();
    let c1 = 0.5 * r + k1;
    let e = [h - leaf.w2(0.0), -c1, 0.5];
    let e2 = poly_mul(&e, &e);
    let mut coeffs = [0.0; 5];
    for i in 0..3 {
        coeffs[i] = p[i] - 4.0 * e2[i];
    }
    // The u⁴ terms cancel and the u³ coefficient reduces to 4k₁.
    coeffs[3] = 4.0 * k1;
    coeffs[4] = 0.0;

    let roots = real_roots(&coeffs);
    let (lo, hi) = leaf.r1_range();
    let dcoeffs = poly_deriv(&coeffs);
    let scale = coeffs.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let inside: Vec<f64> = roots.iter().copied().filter(|x| *x > lo && *x < hi).collect();
    // A double root splits into a pair about sqrt(eps) apart, so each root is moved
    // to the nearby critical point of w₄ before testing.
    let ddcoeffs = poly_deriv(&dcoeffs);
    let mut double_roots: Vec<f64> = Vec::new();
    for &x0 in &inside {
        let mut x = x0;
        for _ in 0..20 {
            let curv = poly_eval(&ddcoeffs, x);
            if curv == 0.0 {
                break;
            }
            let step = poly_eval(&dcoeffs, x) / curv;
            x -= step;
            if step.abs() <= 1e-16 * x.abs().max(1.0) {
                break;
            }
        }
        let near = (x - x0).abs() <= 1e-6 * x0.abs().max(1.0);
        if near
            && poly_eval(&coeffs, x).abs() <= 1e-12 * scale
            && poly_eval(&dcoeffs, x).abs() < DOUBLE_ROOT_TOL * scale
            && !double_roots.iter().any(|d| (d - x).abs() <= 1e-7 * x.abs().max(1.0))
        {
            double_roots.push(x);
        }
    }

    let mut breaks = vec![lo];
    breaks.extend(inside.iter().copied());
    breaks.push(hi);
    let mut intervals = Vec::new();
    for w in breaks.windows(2) {
        if w[1] - w[0] <= 1e-12 * scale {
            continue;
        }
        let mid = 0.5 * (w[0] + w[1]);
        if poly_eval(&coeffs, mid) > 0.0 {
            intervals.push(MotionInterval::new(w[0], w[1], &coeffs)?);
        }
    }
    if intervals.is_empty() && double_roots.is_empty() {
        return Err(Error::NoMotion { h });
    }
    Ok(QuarticData {
        h,
        coeffs,
        roots,
        double_roots,
        intervals,
        leaf: *leaf,
    })
}

/// Time from the lower turning point `ρ₋` to `r1`, signed by `branch_sign`.
pub fn time_of_r1(r1: f64, q: &QuarticData, branch_sign: f64) -> Result<f64> {
    let iv = q
        .interval_containing(r1)
        .ok_or_else(|| Error::Domain(format!("r1 = {r1} is not in a motion interval")))?;
    Ok(branch_sign.signum() * iv.rise_time(r1)?)
}

/// `r₁` a time `t` after the state `(r1_0, direction sign_0)`.
pub fn r1_of_t(t: f64, q: &QuarticData, r1_0: f64, sign_0: f64) -> Result<f64> {
    Ok(state_at(t, q, r1_0, sign_0)?.0)
}

fn state_at(t: f64, q: &QuarticData, r1_0: f64, sign_0: f64) -> Result<(f64, f64)> {
    let iv = q
        .interval_containing(r1_0)
        .ok_or_else(|| Error::Domain(format!("r1 = {r1_0} is not in a motion interval")))?;
    let phase0 = iv.phase_of(r1_0, sign_0)?;
    iv.at_phase(phase0 + t)
}

/// `ψ₁ = −sign · arccos(2(H − w₂(r₁)) / √P(r₁))`, where `sign` is the direction of motion of `r₁`.
pub fn psi1_of_r1(r1: f64, q: &QuarticData, leaf: &Leaf22, sign: f64) -> Result<f64> {
    let p = leaf.p(r1);
    if !(p > 0.0) {
        return Err(Error::Domain(format!("r1 = {r1} at a pole of the leaf")));
    }
    let c = 2.0 * (q.h - leaf.w2(r1)) / p.sqrt();
    if c.abs() > 1.0 + 1e-12 {
        return Err(Error::Consistency(format!(
            "arccos argument {c} out of range at r1 = {r1} for H = {}",
            q.h
        )));
    }
    let angle = c.clamp(-1.0, 1.0).acos();
    Ok(if sign >= 0.0 { -angle } else { angle })
}

/// Closed-form solution of the `2 + 2` system on a time grid.
#[derive(Debug, Clone)]
pub struct Solution22 {
    pub h: f64,
    pub quartic: QuarticData,
    /// Period of `r₁`; `None` at an equilibrium.
    pub period: Option<f64>,
    pub interval: Option<(f64, f64)>,
    pub equilibrium: bool,
    pub trajectory: Trajectory,
}

/// Direction of motion of `r₁` at `(r1, psi1)`: `sign(ṙ₁) = −sign(sin ψ₁)`; at a
/// turning point the direction leaving it.
fn initial_direction(iv: &MotionInterval, r1: f64, psi1: f64) -> f64 {
    let s = psi1.sin();
    if s.abs() > 1e-12 {
        -s.signum()
    } else if (r1 - iv.lo).abs() <= (iv.hi - r1).abs() {
        1.0
    } else {
        -1.0
    }
}

/// Evaluates `(r₁(t), ψ₁(t))` on `t_grid` starting from `(r1_0, psi1_0)` at `t = 0`.
pub fn solve_22(leaf: &Leaf22, r1_0: f64, psi1_0: f64, t_grid: &[f64]) -> Result<Solution22> {
    let h = leaf.hamiltonian(r1_0, psi1_0)?;
    let quartic = build_quartic(leaf, h)?;
    let names = vec!["r1".to_string(), "psi1".to_string()];

    let (lo, hi) = leaf.r1_range();
    let at_equilibrium = quartic.equilibrium_near(r1_0).is_some()
        || (r1_0 > lo && r1_0 < hi && {
            let (a, b) = leaf.vector_field(r1_0, psi1_0)?;
            a == 0.0 && b == 0.0
        });
    if at_equilibrium || quartic.interval_containing(r1_0).is_none() {
        if !at_equilibrium {
            return Err(Error::Consistency(format!("r1 = {r1_0} is neither in a motion interval nor an equilibrium")));
        }
        let states = t_grid.iter().map(|_| vec![r1_0, psi1_0]).collect();
        let mut trajectory = Trajectory::from_samples(t_grid.to_vec(), names, states)?;
        attach_energy(&mut trajectory, leaf)?;
        return Ok(Solution22 {
            h,
            quartic,
            period: None,
            interval: None,
            equilibrium: true,
            trajectory,
        });
    }

    let iv = quartic.interval_containing(r1_0).expect("checked above").clone();
    let sign_0 = initial_direction(&iv, r1_0, psi1_0);
    let phase0 = iv.phase_of(r1_0, sign_0)?;
    let mut states = Vec::with_capacity(t_grid.len());
    let mut prev_psi = psi1_0;
    for &t in t_grid {
        let (r1, dir) = iv.at_phase(phase0 + t)?;
        let psi = unwrap_near(psi1_of_r1(r1, &quartic, leaf, dir)?, prev_psi);
        prev_psi = psi;
        states.push(vec![r1, psi]);
    }
    let mut trajectory = Trajectory::from_samples(t_grid.to_vec(), names, states)?;
    attach_energy(&mut trajectory, leaf)?;
    Ok(Solution22 {
        h,
        period: Some(iv.period),
        interval: Some((iv.lo, iv.hi)),
        quartic,
        equilibrium: false,
        trajectory,
    })
}

fn attach_energy(traj: &mut Trajectory, leaf: &Leaf22) -> Result<()> {
    let leaf = *leaf;
    let set = crate::hierarchy::InvariantSet::new().with(crate::hierarchy::NamedFunctional::new("H", move |y: &[f64]| {
        leaf.hamiltonian(y[0], y[1])
    }))?;
    traj.attach_invariants(&set)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{integrate, integrate_dense, uniform_grid, IntegratorOptions};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn generic() -> Leaf22 {
        Leaf22::new(1.0, 1.3, 0.4, 0.3, -0.8, 0.5, 1.1).unwrap()
    }

    fn harmonic(s: f64) -> Leaf22 {
        Leaf22::new(s, s, 0.0, 0.4, 0.4, 0.5, 1.1).unwrap()
    }

    #[test]
    fn w2_examples() {
        let leaf = harmonic(1.3);
        let c = leaf.w2(0.0);
        for r1 in [-0.7, 0.2, 1.1] {
            assert_relative_eq!(leaf.w2(r1), -0.5 * r1 * r1 + c, max_relative = 1e-14);
        }
        let l = generic();
        let (s1, s2, r) = (l.s1, l.s2, l.r);
        let expected = -r * r / 4.0 + 0.25 * (s1 * s1 + s2 * s2) + 0.25 * r * r + 0.5 * (l.a1 - l.a2) * l.d2 * r
            + 0.25 * (s1 + s2).powi(2)
            + 0.5 * (l.a1 + l.a2) * (l.d1 * s1 + l.d2 * s2);
        assert_relative_eq!(l.w2(0.0), expected, max_relative = 1e-14);
        assert_relative_eq!(l.w2(0.3), l.hamiltonian(0.3, FRAC_PI_2).unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn quartic_examples() {
        let leaf = Leaf22::new(1.0, 1.0, 0.0, 0.3, -0.8, 0.5, 1.1).unwrap();
        let q = build_quartic(&leaf, leaf.w2(0.0)).unwrap();
        assert_relative_eq!(q.w4(0.0), 1.0, max_relative = 1e-14);

        let l = generic();
        let (lo, hi) = l.r1_range();
        let h = l.hamiltonian(0.1, 0.7).unwrap();
        let q = build_quartic(&l, h).unwrap();
        for x in [lo, hi, -l.s1, l.s1] {
            let expected = -4.0 * (h - l.w2(x)).powi(2) + l.p(x);
            assert!((q.w4(x) - expected).abs() < 1e-12);
        }
        assert!(q.w4(-l.s1) < 0.0 && q.w4(l.s1) < 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = rng.gen_range(-2.0..2.0);
            let direct = l.w4_direct(x, h);
            assert!((q.w4(x) - direct).abs() <= 1e-9 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn harmonic_quartic_factorizes() {
        let s = 1.2;
        let leaf = harmonic(s);
        let e = -0.1;
        let q = build_quartic(&leaf, leaf.w2(0.0) + e).unwrap();
        for x in [-0.5, 0.0, 0.3, 0.8] {
            assert_relative_eq!(q.w4(x), (s * s + 2.0 * e) * (s * s - 2.0 * e - 2.0 * x * x), max_relative = 1e-12);
        }
        let rho = ((s * s - 2.0 * e) / 2.0).sqrt();
        assert_eq!(q.roots.len(), 2);
        assert!((q.roots[0] + rho).abs() < 1e-12 && (q.roots[1] - rho).abs() < 1e-12);
        let iv = &q.intervals[0];
        let omega = ((s * s + 2.0 * e) / 2.0).sqrt();
        assert_relative_eq!(iv.period, 2.0 * std::f64::consts::PI / omega, max_relative = 1e-8);
    }

    #[test]
    fn time_map_examples() {
        let l = generic();
        let q = build_quartic(&l, l.hamiltonian(0.1, 0.7).unwrap()).unwrap();
        let iv = q.interval_containing(0.1).unwrap().clone();
        assert_eq!(time_of_r1(iv.lo, &q, 1.0).unwrap(), 0.0);
        assert_relative_eq!(time_of_r1(iv.hi, &q, 1.0).unwrap(), 0.5 * iv.period, max_relative = 1e-12);
        assert!(time_of_r1(iv.hi + 0.1, &q, 1.0).is_err());
        for sign in [1.0, -1.0] {
            assert!((r1_of_t(0.0, &q, 0.1, sign).unwrap() - 0.1).abs() < 1e-12);
            assert!((r1_of_t(iv.period, &q, 0.1, sign).unwrap() - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn psi_reconstruction_examples() {
        let l = generic();
        let r1 = 0.2;
        let top = l.w2(r1) + 0.5 * l.p(r1).sqrt();
        let q = build_quartic(&l, top).unwrap();
        assert!(psi1_of_r1(r1, &q, &l, 1.0).unwrap().abs() < 1e-7);
        let q = build_quartic(&l, l.w2(r1)).unwrap();
        assert_relative_eq!(psi1_of_r1(r1, &q, &l, -1.0).unwrap(), FRAC_PI_2, max_relative = 1e-14);
        assert_relative_eq!(psi1_of_r1(r1, &q, &l, 1.0).unwrap(), -FRAC_PI_2, max_relative = 1e-14);
        let q = build_quartic(&l, l.hamiltonian(0.1, 0.7).unwrap()).unwrap();
        assert!(matches!(psi1_of_r1(0.9, &q, &l, 1.0), Err(Error::Consistency(_))));
    }

    #[test]
    fn solve_matches_ode() {
        let l = generic();
        let (r1_0, psi1_0) = (0.1, 0.7);
        let probe = solve_22(&l, r1_0, psi1_0, &[0.0]).unwrap();
        let period = probe.period.unwrap();
        let grid = uniform_grid(0.0, 2.0 * period, 200);
        let sol = solve_22(&l, r1_0, psi1_0, &grid).unwrap();
        let ode = integrate(
            field22(l),
            &[r1_0, psi1_0],
            (0.0, 2.0 * period),
            &IntegratorOptions::new(1e-12, 1e-14),
            &grid,
            vec!["r1".into(), "psi1".into()],
        )
        .unwrap();
        let mut sup = 0.0f64;
        for (a, b) in sol.trajectory.states.iter().zip(&ode.states) {
            sup = sup.max((a[0] - b[0]).abs());
            assert!((a[1] - b[1]).abs() < 1e-5, "{a:?} {b:?}");
        }
        assert!(sup < 1e-6, "{sup:e}");
        assert!(sol.trajectory.drift[0] < 1e-9 * sol.h.abs().max(1.0));
    }

    #[test]
    fn period_matches_return_time() {
        let l = generic();
        let sol = solve_22(&l, 0.1, 0.7, &[0.0]).unwrap();
        let (lo, hi) = sol.interval.unwrap();
        let period = sol.period.unwrap();
        let mid = 0.5 * (lo + hi);
        let q = &sol.quartic;
        let psi = psi1_of_r1(mid, q, &l, 1.0).unwrap();
        let dense = integrate_dense(field22(l), &[mid, psi], (0.0, 1.5 * period), &IntegratorOptions::new(1e-13, 1e-15))
            .unwrap();
        // Upward crossing of r1 = mid after the first half period.
        let f = |t: f64| dense.eval(t).unwrap()[0] - mid;
        let (mut a, mut b) = (0.75 * period, 1.25 * period);
        assert!(f(a) < 0.0 && f(b) > 0.0);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if f(m) < 0.0 {
                a = m
            } else {
                b = m
            }
        }
        assert_relative_eq!(0.5 * (a + b), period, max_relative = 1e-6);
    }

    #[test]
    fn harmonic_matches_sine() {
        let s = 1.1;
        let leaf = harmonic(s);
        let psi0 = -0.9;
        let sol = solve_22(&leaf, 0.0, psi0, &[0.0]).unwrap();
        let e = sol.h - leaf.w2(0.0);
        let omega = ((s * s + 2.0 * e) / 2.0).sqrt();
        let rho = ((s * s - 2.0 * e) / 2.0).sqrt();
        let grid = uniform_grid(0.0, 4.0 * std::f64::consts::PI / omega, 100);
        let sol = solve_22(&leaf, 0.0, psi0, &grid).unwrap();
        for (t, y) in grid.iter().zip(&sol.trajectory.states) {
            assert!((y[0] - rho * (omega * t).sin()).abs() < 1e-8, "t = {t}");
        }
    }

    #[test]
    fn equilibrium_is_constant() {
        // ψ₁ = 0 and ψ̇₁ = 0: the maximum of H over the leaf.
        let l = generic();
        let mut r = 0.0;
        for _ in 0..100 {
            let f = |x: f64| l.vector_field(x, 0.0).unwrap().1;
            let d = (f(r + 1e-7) - f(r - 1e-7)) / 2e-7;
            r -= f(r) / d;
        }
        let sol = solve_22(&l, r, 0.0, &uniform_grid(0.0, 5.0, 5)).unwrap();
        assert!(sol.equilibrium, "{:?}", sol.quartic);
        assert!(sol.trajectory.states.iter().all(|y| y == &vec![r, 0.0]));
    }

    #[test]
    fn empty_level_is_no_motion() {
        let l = generic();
        assert!(matches!(build_quartic(&l, 1e3), Err(Error::NoMotion { .. })));
    }
}

#[cfg(test)]
mod embedding_tests {
    use super::*;
    use crate::reduction23::{reduced_vector_field, LeafParams, ReducedState};

    #[test]
    fn frozen_third_sphere_reproduces_field() {
        let params = SystemParams::new(vec![0.3, -0.8], vec![0.5, 1.1, -0.7], 0.0, 1).unwrap();
        let (s1, s2, r) = (1.0, 1.3, 0.4);
        let leaf22 = Leaf22::from_params(&params, s1, s2, r).unwrap();
        let leaf23 = LeafParams::new([s1, s2, 0.0], r).unwrap();
        for (r1, psi1, psi2) in [(0.1, 0.7, 0.2), (-0.3, 2.5, -1.0), (0.6, -1.2, 0.4)] {
            let state = ReducedState::new(leaf23, r1, r - r1, psi1, psi2).unwrap();
            let v = reduced_vector_field(&state, &params).unwrap();
            let (rdot, psidot) = leaf22.vector_field(r1, psi1 - psi2).unwrap();
            assert!((v[0] - rdot).abs() < 1e-12, "{v:?} {rdot}");
            assert!((v[2] - v[3] - psidot).abs() < 1e-12, "{v:?} {psidot}");
        }
    }
}
