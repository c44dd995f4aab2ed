//! Reduction of the `2 × 3` system to the sphere-product leaves
//! `S²_{s₁} × S²_{s₂} × S²_{s₃}`: leaf coordinates, the momentum map, the
//! reduced Hamiltonians `H`, `G`, `R`, the reduced canonical equations in
//! `(r₁, r₂, ψ₁, ψ₂)` and angle-action coordinates from a generating function.
//!
//! Conventions:
//! * `η_k = z̄_k v_k`, `r_k = |z_k|² − |v_k|²`, `s_k = |z_k|² + |v_k|²`.
//! * `φ_k = arg η_k ∈ (−π, π]`, so `η_k = ½√(s_k² − r_k²) e^{iφ_k}`.
//! * The reduced equations use the canonical bracket `{r_i, ψ_j} = δ_ij`.
//!   Under the full-space bracket `{r_k, φ_l} = 2δ_kl`, so the image of a
//!   full-space trajectory moves at [`REDUCED_TIME_SCALE`] times the reduced
//!   field.

use std::f64::consts::PI;

use nalgebra::Matrix2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::hierarchy::Observable;
use crate::linalg::{SystemParams, WaveState};
use crate::quad::GaussRule;

/// Ratio between the full-space time derivative of `(r₁, r₂, ψ₁, ψ₂)` and
/// the reduced canonical field.
pub const REDUCED_TIME_SCALE: f64 = 2.0;

/// Newton iteration cap in [`solve_angles`].
pub const NEWTON_MAX_ITER: usize = 50;

/// Relative residual accepted by [`solve_angles`].
pub const NEWTON_TOL: f64 = 1e-12;

/// `|det J| ≤ SINGULAR_TOL · ‖J‖²` is treated as a singular Jacobian.
pub const SINGULAR_TOL: f64 = 1e-14;

/// Panels of the generating-function quadrature at the first level (64 nodes).
pub const PHI_MIN_PANELS: usize = 4;

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    let y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y - 2.0 * PI
    } else {
        y
    }
}

/// Shifts `x` by a multiple of `2π` to the representative closest to `reference`.
pub fn unwrap_near(x: f64, reference: f64) -> f64 {
    reference + wrap_angle(x - reference)
}

/// `η_k`, `r_k`, `s_k` of one point of `ℂ³ × ℂ³`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafCoords {
    pub eta: [Complex64; 3],
    pub r: [f64; 3],
    pub s: [f64; 3],
}

impl LeafCoords {
    /// `max_k |s_k² − r_k² − 4|η_k|²|`.
    pub fn casimir_defect(&self) -> f64 {
        (0..3)
            .map(|k| (self.s[k].powi(2) - self.r[k].powi(2) - 4.0 * self.eta[k].norm_sqr()).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_polar(&self) -> PolarLeafState {
        PolarLeafState {
            s: self.s,
            r: self.r,
            phi: [self.eta[0].arg(), self.eta[1].arg(), self.eta[2].arg()],
        }
    }
}

pub fn to_leaf_coords(z: &[Complex64; 3], v: &[Complex64; 3]) -> LeafCoords {
    let mut out = LeafCoords {
        eta: [Complex64::new(0.0, 0.0); 3],
        r: [0.0; 3],
        s: [0.0; 3],
    };
    for k in 0..3 {
        out.eta[k] = z[k].conj() * v[k];
        out.r[k] = z[k].norm_sqr() - v[k].norm_sqr();
        out.s[k] = z[k].norm_sqr() + v[k].norm_sqr();
    }
    out
}

/// `J_k = i [[|z_k|², z̄_k v_k], [z_k v̄_k, |v_k|²]]`.
pub fn momentum_map(z: &[Complex64; 3], v: &[Complex64; 3]) -> [Matrix2<Complex64>; 3] {
    let i = Complex64::i();
    std::array::from_fn(|k| {
        Matrix2::new(
            i * z[k].norm_sqr(),
            i * z[k].conj() * v[k],
            i * z[k] * v[k].conj(),
            i * v[k].norm_sqr(),
        )
    })
}

/// Rows `(z, v)` of a `2 × 3` state.
pub fn rows_of(state: &WaveState) -> Result<([Complex64; 3], [Complex64; 3])> {
    if state.shape() != (2, 3) {
        return Err(Error::Dimension(format!("expected a 2x3 state, got {:?}", state.shape())));
    }
    Ok((
        std::array::from_fn(|k| state.z[(0, k)]),
        std::array::from_fn(|k| state.z[(1, k)]),
    ))
}

pub fn leaf_of_state(state: &WaveState) -> Result<LeafCoords> {
    let (z, v) = rows_of(state)?;
    Ok(to_leaf_coords(&z, &v))
}

fn check_params(params: &SystemParams) -> Result<()> {
    if params.n_plus() != 2 || params.n_minus() != 3 {
        return Err(Error::Dimension(format!(
            "reduction needs n+ = 2 and n- = 3, got {} and {}",
            params.n_plus(),
            params.n_minus()
        )));
    }
    Ok(())
}

fn domain_slack(s: f64) -> f64 {
    1e-12 * s.max(1.0)
}

/// Darboux coordinates `(r_k, φ_k)` on the leaf of radii `s_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarLeafState {
    pub s: [f64; 3],
    pub r: [f64; 3],
    pub phi: [f64; 3],
}

impl PolarLeafState {
    pub fn new(s: [f64; 3], r: [f64; 3], phi: [f64; 3]) -> Result<Self> {
        let out = Self { s, r, phi };
        out.validate()?;
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if !(self.s[k] >= 0.0) || !self.r[k].is_finite() || !self.phi[k].is_finite() {
                return Err(Error::Validation(format!("invalid polar coordinates on sphere {}", k + 1)));
            }
            if self.r[k].abs() > self.s[k] + domain_slack(self.s[k]) {
                return Err(Error::Domain(format!(
                    "|r{}| = {} exceeds s{} = {}",
                    k + 1,
                    self.r[k].abs(),
                    k + 1,
                    self.s[k]
                )));
            }
        }
        Ok(())
    }

    fn radial(&self, k: usize) -> f64 {
        (self.s[k].powi(2) - self.r[k].powi(2)).max(0.0)
    }

    pub fn eta(&self) -> [Complex64; 3] {
        std::array::from_fn(|k| Complex64::from_polar(0.5 * self.radial(k).sqrt(), self.phi[k]))
    }

    /// `(r₁, r₂, ψ₁ = φ₁ − φ₃, ψ₂ = φ₂ − φ₃)` on the level `R = r₁ + r₂ + r₃`.
    pub fn reduce(&self) -> ReducedState {
        ReducedState {
            leaf: LeafParams {
                s: self.s,
                r: self.r.iter().sum(),
            },
            r1: self.r[0],
            r2: self.r[1],
            psi1: wrap_angle(self.phi[0] - self.phi[2]),
            psi2: wrap_angle(self.phi[1] - self.phi[2]),
        }
    }
}

/// Leaf radii and the level `r` of `R`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafParams {
    pub s: [f64; 3],
    pub r: f64,
}

impl LeafParams {
    pub fn new(s: [f64; 3], r: f64) -> Result<Self> {
        if s.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || !r.is_finite() {
            return Err(Error::Validation(format!("invalid leaf parameters s = {s:?}, r = {r}")));
        }
        if s[0] == 0.0 || s[1] == 0.0 {
            return Err(Error::Domain("spheres 1 and 2 must have positive radius".into()));
        }
        if r.abs() > s.iter().sum::<f64>() + domain_slack(s.iter().sum()) {
            return Err(Error::Domain(format!("level r = {r} is empty for radii {s:?}")));
        }
        Ok(Self { s, r })
    }

    /// Third sphere collapsed to a point; its coordinates are frozen at `r₃ = 0`, `η₃ = 0`.
    pub fn third_sphere_frozen(&self) -> bool {
        self.s[2] <= 1e-15 * (self.s[0] + self.s[1])
    }
}

/// A point `(r₁, r₂, ψ₁, ψ₂)` of the reduced phase space over `leaf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedState {
    pub leaf: LeafParams,
    pub r1: f64,
    pub r2: f64,
    pub psi1: f64,
    pub psi2: f64,
}

impl ReducedState {
    pub fn new(leaf: LeafParams, r1: f64, r2: f64, psi1: f64, psi2: f64) -> Result<Self> {
        let out = Self {
            leaf,
            r1,
            r2,
            psi1,
            psi2,
        };
        out.check_domain()?;
        Ok(out)
    }

    pub fn r3(&self) -> f64 {
        self.leaf.r - self.r1 - self.r2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.r1, self.r2, self.psi1, self.psi2]
    }

    pub fn with_coords(&self, y: &[f64]) -> Self {
        Self {
            leaf: self.leaf,
            r1: y[0],
            r2: y[1],
            psi1: y[2],
            psi2: y[3],
        }
    }

    fn check_domain(&self) -> Result<()> {
        let r = [self.r1, self.r2, self.r3()];
        for k in 0..3 {
            if !r[k].is_finite() {
                return Err(Error::Validation(format!("non-finite r{}", k + 1)));
            }
            if r[k].abs() > self.leaf.s[k] + domain_slack(self.leaf.s[k]) {
                return Err(Error::Domain(format!(
                    "|r{}| = {} exceeds s{} = {}",
                    k + 1,
                    r[k].abs(),
                    k + 1,
                    self.leaf.s[k]
                )));
            }
        }
        if !(self.psi1.is_finite() && self.psi2.is_finite()) {
            return Err(Error::Validation("non-finite angle".into()));
        }
        Ok(())
    }

    /// Polar leaf point with `φ₃ = 0`.
    pub fn to_polar(&self) -> PolarLeafState {
        PolarLeafState {
            s: self.leaf.s,
            r: [self.r1, self.r2, self.r3()],
            phi: [self.psi1, self.psi2, 0.0],
        }
    }
}

/// Angle-action coordinates `(γ, τ, G, H)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleActionPoint {
    pub gamma: f64,
    pub tau: f64,
    pub g: f64,
    pub h: f64,
}

/// `(H, G, R)` in polar coordinates.
pub fn reduced_invariants(state: &PolarLeafState, params: &SystemParams) -> Result<(f64, f64, f64)> {
    check_params(params)?;
    state.validate()?;
    let (a, d) = (&params.a, &params.d);
    let (s, r, phi) = (&state.s, &state.r, &state.phi);
    let p: [f64; 3] = std::array::from_fn(|k| state.radial(k));
    let pairs = [(0, 1), (0, 2), (1, 2)];
    let sum_r: f64 = r.iter().sum();
    let sum_s: f64 = s.iter().sum();
    let dot = |u: &[f64], w: &[f64]| u.iter().zip(w).map(|(x, y)| x * y).sum::<f64>();
    let sq = |u: &[f64]| u.iter().map(|x| x * x).collect::<Vec<_>>();
    let d2 = sq(d);

    let mut h = 0.0;
    let mut g = 0.0;
    for (i, j) in pairs {
        let c = 0.5 * (p[i] * p[j]).sqrt() * (phi[i] - phi[j]).cos();
        h += c;
        g += (d[i] + d[j]) * c;
    }
    h += -0.25 * dot(r, r) + 0.25 * dot(s, s) + 0.25 * sum_r * sum_r + 0.5 * (a[0] - a[1]) * dot(d, r)
        + 0.25 * sum_s * sum_s
        + 0.5 * (a[0] + a[1]) * dot(d, s);
    g += -0.5 * dot(d, &sq(r)) + 0.5 * dot(d, &sq(s)) + 0.5 * (a[0] - a[1]) * dot(&d2, r) + 0.5 * sum_r * dot(d, r);
    Ok((h, g, sum_r))
}

/// `f`, `f₁`, `f₂`, `h`, `g` and their `r`-gradients at a reduced point.
#[derive(Debug, Clone, Copy)]
struct Parts {
    f: [f64; 3],
    df: [[f64; 2]; 3],
    h: f64,
    dh: [f64; 2],
    g: f64,
    /// Weights `d₁+d₂`, `d₁+d₃`, `d₂+d₃` of the three cosine terms in `G`.
    w: [f64; 3],
}

fn parts(leaf: &LeafParams, params: &SystemParams, r1: f64, r2: f64, derivatives: bool) -> Result<Parts> {
    let (a, d) = (&params.a, &params.d);
    let s = leaf.s;
    let r = leaf.r;
    let r3 = r - r1 - r2;
    let rr = [r1, r2, r3];
    let frozen = leaf.third_sphere_frozen();
    if frozen && r3.abs() > domain_slack(s[0] + s[1]) {
        return Err(Error::Domain(format!("r3 = {r3} on a collapsed third sphere")));
    }
    let p: [f64; 3] = std::array::from_fn(|k| s[k] * s[k] - rr[k] * rr[k]);
    for (k, pk) in p.iter().enumerate() {
        if *pk < -domain_slack(s[k] * s[k]) {
            return Err(Error::Domain(format!("|r{}| exceeds s{}", k + 1, k + 1)));
        }
    }
    let p: [f64; 3] = std::array::from_fn(|k| if frozen && k == 2 { 0.0 } else { p[k].max(0.0) });

    // f = ½√(P₁P₂), f₁ = ½√(P₁P₃), f₂ = ½√(P₂P₃); ∂P_k/∂r_j with r₃ = r − r₁ − r₂.
    let dp = [[-2.0 * r1, 0.0], [0.0, -2.0 * r2], [2.0 * r3, 2.0 * r3]];
    let idx = [(0, 1), (0, 2), (1, 2)];
    let mut f = [0.0; 3];
    let mut df = [[0.0; 2]; 3];
    for (m, &(i, j)) in idx.iter().enumerate() {
        let prod = p[i] * p[j];
        f[m] = 0.5 * prod.sqrt();
        if derivatives && !(frozen && j == 2) {
            if prod <= 0.0 {
                let k = if p[i] <= 0.0 { i } else { j };
                return Err(Error::Domain(format!("sphere {} is at a pole (|r{}| = s{})", k + 1, k + 1, k + 1)));
            }
            let root = prod.sqrt();
            for c in 0..2 {
                df[m][c] = (dp[i][c] * p[j] + p[i] * dp[j][c]) / (4.0 * root);
            }
        }
    }

    let sum_s: f64 = s.iter().sum();
    let dr: f64 = d[0] * r1 + d[1] * r2 + d[2] * r3;
    let h = -0.25 * (r1 * r1 + r2 * r2 + r3 * r3) + 0.25 * (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]) + 0.25 * r * r
        + 0.5 * (a[0] - a[1]) * dr
        + 0.25 * sum_s * sum_s
        + 0.5 * (a[0] + a[1]) * (d[0] * s[0] + d[1] * s[1] + d[2] * s[2]);
    let g = -0.5 * (d[0] * r1 * r1 + d[1] * r2 * r2 + d[2] * r3 * r3)
        + 0.5 * (d[0] * s[0] * s[0] + d[1] * s[1] * s[1] + d[2] * s[2] * s[2])
        + 0.5 * (a[0] - a[1]) * (d[0] * d[0] * r1 + d[1] * d[1] * r2 + d[2] * d[2] * r3)
        + 0.5 * r * dr;
    let da = 0.5 * (a[0] - a[1]);
    let dh = [
        -0.5 * (r1 - r3) + da * (d[0] - d[2]),
        -0.5 * (r2 - r3) + da * (d[1] - d[2]),
    ];
    Ok(Parts {
        f,
        df,
        h,
        dh,
        g,
        w: [d[0] + d[1], d[0] + d[2], d[1] + d[2]],
    })
}

fn cosines(psi1: f64, psi2: f64) -> [f64; 3] {
    [(psi1 - psi2).cos(), psi1.cos(), psi2.cos()]
}

/// `∂/∂ψ₁`, `∂/∂ψ₂` of the three cosine terms.
fn dcos(psi1: f64, psi2: f64) -> [[f64; 2]; 3] {
    let s12 = (psi1 - psi2).sin();
    [[-s12, s12], [-psi1.sin(), 0.0], [0.0, -psi2.sin()]]
}

fn eval_hg(parts: &Parts, psi1: f64, psi2: f64) -> (f64, f64) {
    let c = cosines(psi1, psi2);
    let mut h = parts.h;
    let mut g = parts.g;
    for m in 0..3 {
        h += parts.f[m] * c[m];
        g += parts.w[m] * parts.f[m] * c[m];
    }
    (h, g)
}

/// `[[∂H/∂ψ₁, ∂H/∂ψ₂], [∂G/∂ψ₁, ∂G/∂ψ₂]]`.
fn angle_jacobian(parts: &Parts, psi1: f64, psi2: f64) -> [[f64; 2]; 2] {
    let dc = dcos(psi1, psi2);
    let mut j = [[0.0; 2]; 2];
    for m in 0..3 {
        for c in 0..2 {
            j[0][c] += parts.f[m] * dc[m][c];
            j[1][c] += parts.w[m] * parts.f[m] * dc[m][c];
        }
    }
    j
}

/// `(H, G)` of a reduced point.
pub fn reduced_h_g(state: &ReducedState, params: &SystemParams) -> Result<(f64, f64)> {
    check_params(params)?;
    state.check_domain()?;
    let p = parts(&state.leaf, params, state.r1, state.r2, false)?;
    Ok(eval_hg(&p, state.psi1, state.psi2))
}

/// `(ṙ₁, ṙ₂, ψ̇₁, ψ̇₂)` of the reduced canonical system generated by `H`.
pub fn reduced_vector_field(state: &ReducedState, params: &SystemParams) -> Result<[f64; 4]> {
    check_params(params)?;
    state.check_domain()?;
    let p = parts(&state.leaf, params, state.r1, state.r2, true)?;
    let c = cosines(state.psi1, state.psi2);
    let jac = angle_jacobian(&p, state.psi1, state.psi2);
    let mut out = [jac[0][0], jac[0][1], 0.0, 0.0];
    for i in 0..2 {
        let mut dh = p.dh[i];
        for m in 0..3 {
            dh += p.df[m][i] * c[m];
        }
        out[2 + i] = -dh;
    }
    Ok(out)
}

/// Reduced field over a fixed leaf as an integrator right-hand side on `(r₁, r₂, ψ₁, ψ₂)`.
pub fn reduced_field(leaf: LeafParams, params: SystemParams) -> impl Fn(f64, &[f64], &mut [f64]) -> Result<()> + Clone {
    move |_t, y, out| {
        let state = ReducedState {
            leaf,
            r1: y[0],
            r2: y[1],
            psi1: y[2],
            psi2: y[3],
        };
        out.copy_from_slice(&reduced_vector_field(&state, &params)?);
        Ok(())
    }
}

/// Canonical bracket `Σ_k ∂f/∂r_k ∂g/∂φ_k − ∂f/∂φ_k ∂g/∂r_k` of two functions of
/// `(r, φ)` by central differences with step `h`.
pub fn darboux_bracket_fd<F, G>(f: F, g: G, state: &PolarLeafState, h: f64) -> Result<f64>
where
    F: Fn(&PolarLeafState) -> Result<f64>,
    G: Fn(&PolarLeafState) -> Result<f64>,
{
    let partial = |fun: &dyn Fn(&PolarLeafState) -> Result<f64>, k: usize, angle: bool| -> Result<f64> {
        let mut plus = *state;
        let mut minus = *state;
        if angle {
            plus.phi[k] += h;
            minus.phi[k] -= h;
        } else {
            plus.r[k] += h;
            minus.r[k] -= h;
        }
        Ok((fun(&plus)? - fun(&minus)?) / (2.0 * h))
    };
    let mut acc = 0.0;
    for k in 0..3 {
        acc += partial(&f, k, false)? * partial(&g, k, true)? - partial(&f, k, true)? * partial(&g, k, false)?;
    }
    Ok(acc)
}

/// Newton solve of `H(r₁, r₂, ψ₁, ψ₂) = H*`, `G(…) = G*` for the angles, starting at `guess`.
pub fn solve_angles(
    r1: f64,
    r2: f64,
    targets: (f64, f64),
    leaf: &LeafParams,
    params: &SystemParams,
    guess: (f64, f64),
) -> Result<(f64, f64)> {
    check_params(params)?;
    let (g_star, h_star) = targets;
    ReducedState::new(*leaf, r1, r2, guess.0, guess.1)?;
    let p = parts(leaf, params, r1, r2, false)?;
    let scale = 1f64.max(h_star.abs()).max(g_star.abs());
    let tol = NEWTON_TOL * scale;
    let residual = |psi: (f64, f64)| {
        let (h, g) = eval_hg(&p, psi.0, psi.1);
        [h - h_star, g - g_star]
    };
    let norm = |v: [f64; 2]| v[0].abs().max(v[1].abs());

    let mut psi = guess;
    let mut res = residual(psi);
    for iteration in 0..=NEWTON_MAX_ITER {
        let rn = norm(res);
        if rn < tol {
            return Ok(psi);
        }
        let no_conv = || Error::NoConvergence {
            iterations: iteration,
            residual: rn,
            psi1: psi.0,
            psi2: psi.1,
        };
        if iteration == NEWTON_MAX_ITER {
            return Err(no_conv());
        }
        let j = angle_jacobian(&p, psi.0, psi.1);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let jn = j.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        if jn == 0.0 || det.abs() <= SINGULAR_TOL * jn * jn {
            if rn <= 1e-8 * scale {
                return Err(Error::BranchPoint {
                    s: None,
                    psi1: psi.0,
                    psi2: psi.1,
                });
            }
            return Err(no_conv());
        }
        let step = (
            -(j[1][1] * res[0] - j[0][1] * res[1]) / det,
            -(-j[1][0] * res[0] + j[0][0] * res[1]) / det,
        );
        let mut lambda = 1.0;
        loop {
            let trial = (psi.0 + lambda * step.0, psi.1 + lambda * step.1);
            let tres = residual(trial);
            if norm(tres) < rn || norm(tres) < tol {
                psi = trial;
                res = tres;
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-6 {
                return Err(no_conv());
            }
        }
    }
    unreachable!("loop returns on its last iteration")
}

fn angle_jacobian_det_ratio(leaf: &LeafParams, params: &SystemParams, r1: f64, r2: f64, psi: (f64, f64)) -> Result<f64> {
    let p = parts(leaf, params, r1, r2, false)?;
    let j = angle_jacobian(&p, psi.0, psi.1);
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let jn = j.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(if jn == 0.0 { 0.0 } else { det.abs() / (jn * jn) })
}

/// Angles continued along the ray `s ↦ (s r₁, s r₂)` from `s = 1` (seeded by
/// `guess`) through the given nodes, which must be ordered from 1 towards 0.
fn continue_along_ray(
    r1: f64,
    r2: f64,
    targets: (f64, f64),
    leaf: &LeafParams,
    params: &SystemParams,
    guess: (f64, f64),
    nodes: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(nodes.len());
    let at = |s: f64, g: (f64, f64)| -> Result<(f64, f64)> {
        solve_angles(s * r1, s * r2, targets, leaf, params, g).map_err(|e| match e {
            Error::BranchPoint { psi1, psi2, .. } => Error::BranchPoint { s: Some(s), psi1, psi2 },
            other => other,
        })
    };
    let start = at(1.0, guess)?;
    let mut prev: (f64, (f64, f64)) = (1.0, start);
    let mut prev2: Option<(f64, (f64, f64))> = None;
    for &s in nodes {
        let predictor = match prev2 {
            Some((s0, p0)) if (prev.0 - s0).abs() > 0.0 => {
                let t = (s - prev.0) / (prev.0 - s0);
                (prev.1 .0 + t * (prev.1 .0 - p0.0), prev.1 .1 + t * (prev.1 .1 - p0.1))
            }
            _ => prev.1,
        };
        let psi = match at(s, predictor) {
            Ok(p) => p,
            Err(Error::NoConvergence { .. }) => at(s, prev.1)?,
            Err(e) => return Err(e),
        };
        let jump = (psi.0 - prev.1 .0).abs().max((psi.1 - prev.1 .1).abs());
        if jump > 0.5 {
            return Err(Error::BranchPoint {
                s: Some(s),
                psi1: psi.0,
                psi2: psi.1,
            });
        }
        if angle_jacobian_det_ratio(leaf, params, s * r1, s * r2, psi)? <= 1e-10 {
            return Err(Error::BranchPoint {
                s: Some(s),
                psi1: psi.0,
                psi2: psi.1,
            });
        }
        prev2 = Some(prev);
        prev = (s, psi);
        out.push(psi);
    }
    Ok(out)
}

/// `Φ(r₁, r₂, G, H) = ∫₀¹ (ψ₁(s r₁, s r₂) r₁ + ψ₂(s r₁, s r₂) r₂) ds`, with the
/// angles continued from the branch through `guess` at `s = 1`.
///
/// The quadrature starts with 64 Gauss–Legendre nodes and doubles the panel
/// count until two estimates agree to `1e-12` relative.
#[allow(clippy::too_many_arguments)]
pub fn generating_function(
    r1: f64,
    r2: f64,
    g: f64,
    h: f64,
    leaf: &LeafParams,
    params: &SystemParams,
    guess: (f64, f64),
) -> Result<f64> {
    check_params(params)?;
    if r1 == 0.0 && r2 == 0.0 {
        return Ok(0.0);
    }
    const REL_TOL: f64 = 1e-12;
    const MAX_PANELS: usize = 256;
    let rule = GaussRule::default();
    let estimate = |panels: usize| -> Result<f64> {
        let nodes = rule.composite(1.0, 0.0, panels);
        let s: Vec<f64> = nodes.iter().map(|n| n.0).collect();
        let psi = continue_along_ray(r1, r2, (g, h), leaf, params, guess, &s)?;
        Ok(-nodes
            .iter()
            .zip(&psi)
            .map(|(&(_, w), p)| w * (p.0 * r1 + p.1 * r2))
            .sum::<f64>())
    };
    let mut panels = PHI_MIN_PANELS;
    let mut previous = estimate(panels)?;
    while panels < MAX_PANELS {
        panels *= 2;
        let current = estimate(panels)?;
        if (current - previous).abs() <= REL_TOL * current.abs().max(1.0) {
            return Ok(current);
        }
        previous = current;
    }
    Err(Error::Numerical(format!(
        "generating function quadrature did not converge with {MAX_PANELS} panels"
    )))
}

/// `(γ, τ) = (∂Φ/∂G, ∂Φ/∂H)` by central differences with step `1e-6 · max(1, |·|)`.
pub fn angle_action(state: &ReducedState, params: &SystemParams) -> Result<AngleActionPoint> {
    let (h, g) = reduced_h_g(state, params)?;
    let guess = (state.psi1, state.psi2);
    let phi = |gg: f64, hh: f64| generating_function(state.r1, state.r2, gg, hh, &state.leaf, params, guess);
    let dg = 1e-6 * g.abs().max(1.0);
    let dh = 1e-6 * h.abs().max(1.0);
    let gamma = (phi(g + dg, h)? - phi(g - dg, h)?) / (2.0 * dg);
    let tau = (phi(g, h + dh)? - phi(g, h - dh)?) / (2.0 * dh);
    Ok(AngleActionPoint { gamma, tau, g, h })
}

/// `G = F − (a₁+a₂)H + ½(a₂−a₁)(Σs)R + a₁a₂δ₁ − ½(a₁+a₂)δ₂ − ½(Σs)δ₁` from full-space values.
pub fn g_from_full(params: &SystemParams, state: &WaveState) -> Result<f64> {
    check_params(params)?;
    let (a1, a2) = (params.a[0], params.a[1]);
    let h = Observable::Quartic.eval(params, state)?;
    let f = Observable::Quintic.eval(params, state)?;
    let d1 = Observable::Delta(1).eval(params, state)?;
    let d2 = Observable::Delta(2).eval(params, state)?;
    let leaf = leaf_of_state(state)?;
    let sum_s: f64 = leaf.s.iter().sum();
    let r = r_from_full(params, state)?;
    Ok(f - (a1 + a2) * h + 0.5 * (a2 - a1) * sum_s * r + a1 * a2 * d1 - 0.5 * (a1 + a2) * d2 - 0.5 * sum_s * d1)
}

/// `R = (2α₁ − (a₁+a₂)α₀)/(a₁ − a₂)`.
pub fn r_from_full(params: &SystemParams, state: &WaveState) -> Result<f64> {
    check_params(params)?;
    let (a1, a2) = (params.a[0], params.a[1]);
    if a1 == a2 {
        return Err(Error::Validation("R from Manley-Rowe integrals needs a1 != a2".into()));
    }
    let a0 = Observable::Alpha(0).eval(params, state)?;
    let al1 = Observable::Alpha(1).eval(params, state)?;
    Ok((2.0 * al1 - (a1 + a2) * a0) / (a1 - a2))
}

/// `α₀ − 2α₁/(a₂ − a₁)`, which differs from `r₁ + r₂ + r₃` in general.
pub fn r_printed_combination(params: &SystemParams, state: &WaveState) -> Result<f64> {
    check_params(params)?;
    let (a1, a2) = (params.a[0], params.a[1]);
    let a0 = Observable::Alpha(0).eval(params, state)?;
    let al1 = Observable::Alpha(1).eval(params, state)?;
    Ok(a0 - 2.0 / (a2 - a1) * al1)
}

/// Reduced point of a full-space `2 × 3` state.
pub fn reduce_full_state(state: &WaveState) -> Result<ReducedState> {
    Ok(leaf_of_state(state)?.to_polar().reduce())
}

/// Exact time derivative of `(r₁, r₂, ψ₁, ψ₂)` along a full-space velocity `Ż`.
pub fn pushforward_velocity(state: &WaveState, zdot: &WaveState) -> Result<[f64; 4]> {
    let (z, v) = rows_of(state)?;
    let (zd, vd) = rows_of(zdot)?;
    let rdot: [f64; 3] = std::array::from_fn(|k| 2.0 * (z[k].conj() * zd[k]).re - 2.0 * (v[k].conj() * vd[k]).re);
    let mut phidot = [0.0; 3];
    for k in 0..3 {
        let eta = z[k].conj() * v[k];
        if eta.norm() == 0.0 {
            return Err(Error::Domain(format!("angle of sphere {} undefined at a pole", k + 1)));
        }
        let etadot = zd[k].conj() * v[k] + z[k].conj() * vd[k];
        phidot[k] = (etadot / eta).im;
    }
    Ok([rdot[0], rdot[1], phidot[0] - phidot[2], phidot[1] - phidot[2]])
}

/// Reduced coordinates along a sequence of full-space states with the angles
/// unwrapped to be continuous.
pub fn reduce_trajectory(states: &[WaveState]) -> Result<Vec<ReducedState>> {
    let mut out: Vec<ReducedState> = Vec::with_capacity(states.len());
    for st in states {
        let mut red = reduce_full_state(st)?;
        if let Some(prev) = out.last() {
            red.psi1 = unwrap_near(red.psi1, prev.psi1);
            red.psi2 = unwrap_near(red.psi2, prev.psi2);
        }
        out.push(red);
    }
    Ok(out)
}

/// A full-space `2 × 3` state whose image is `state` (with `φ₃ = 0`).
pub fn lift_reduced(state: &ReducedState) -> Result<WaveState> {
    state.check_domain()?;
    let polar = state.to_polar();
    let eta = polar.eta();
    let mut z = crate::linalg::CMatrix::zeros(2, 3);
    for k in 0..3 {
        // |z|² = (s + r)/2, |v|² = (s − r)/2, z̄ v = η
        let zm = (0.5 * (polar.s[k] + polar.r[k])).max(0.0).sqrt();
        let vm = (0.5 * (polar.s[k] - polar.r[k])).max(0.0).sqrt();
        z[(0, k)] = Complex64::new(zm, 0.0);
        z[(1, k)] = if zm > 0.0 {
            eta[k] / zm
        } else {
            Complex64::new(vm, 0.0)
        };
    }
    WaveState::new(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{poisson_bracket_fd, CMatrixOf, Extended, Real, FD_STEP};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> SystemParams {
        SystemParams::new(vec![0.3, -0.8], vec![0.5, 1.1, -0.7], 0.0, 4).unwrap()
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn leaf_coordinate_examples() {
        let o = c(0.0, 0.0);
        let one = c(1.0, 0.0);
        let lc = to_leaf_coords(&[one, o, o], &[o, one, o]);
        assert_eq!(lc.eta, [o; 3]);
        assert_eq!(lc.r, [1.0, -1.0, 0.0]);
        assert_eq!(lc.s, [1.0, 1.0, 0.0]);
        let lc = to_leaf_coords(&[one; 3], &[one; 3]);
        assert_eq!(lc.eta, [one; 3]);
        assert_eq!(lc.r, [0.0; 3]);
        assert_eq!(lc.s, [2.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = WaveState::random(&mut rng, 2, 3, 2.0);
            assert!(leaf_of_state(&s).unwrap().casimir_defect() <= 1e-12);
        }
    }

    #[test]
    fn momentum_map_structure() {
        let o = c(0.0, 0.0);
        let j = momentum_map(&[c(1.0, 0.0), o, o], &[o; 3]);
        assert_eq!(j[0], Matrix2::new(Complex64::i(), o, o, o));
        assert_eq!(j[1], Matrix2::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = WaveState::random(&mut rng, 2, 3, 1.0);
        let (z, v) = rows_of(&s).unwrap();
        for m in momentum_map(&z, &v) {
            let herm = m * Complex64::new(0.0, -1.0);
            assert!((herm - herm.adjoint()).norm() < 1e-15);
            assert!(herm.determinant().norm() < 1e-15);
            assert!(herm.trace().re >= 0.0);
        }
    }

    #[test]
    fn pulled_back_brackets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eta = |k: usize| move |z: &CMatrixOf<Extended>| z[(0, k)].conj() * z[(1, k)];
        let r = |k: usize| move |z: &CMatrixOf<Extended>| z[(0, k)].norm_sqr() - z[(1, k)].norm_sqr();
        for _ in 0..5 {
            let s = WaveState::random(&mut rng, 2, 3, 1.0);
            let lc = leaf_of_state(&s).unwrap();
            for k in 0..3 {
                let b = crate::linalg::poisson_bracket_fd_complex(
                    eta(k),
                    move |z: &CMatrixOf<Extended>| eta(k)(z).conj(),
                    &s,
                    FD_STEP,
                )
                .unwrap();
                assert!((b - Complex64::i() * lc.r[k]).norm() < 1e-6, "{b}");
                let b = crate::linalg::poisson_bracket_fd_complex(
                    move |z: &CMatrixOf<Extended>| num_complex::Complex::new(r(k)(z), Extended::from(0.0)),
                    eta(k),
                    &s,
                    FD_STEP,
                )
                .unwrap();
                assert!((b - 2.0 * Complex64::i() * lc.eta[k]).norm() < 1e-6, "{b}");
            }
        }
    }

    #[test]
    fn polar_values_match_full_space() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let s = WaveState::random(&mut rng, 2, 3, 1.5);
            let polar = leaf_of_state(&s).unwrap().to_polar();
            let (h, g, r) = reduced_invariants(&polar, &p).unwrap();
            assert_relative_eq!(h, Observable::Quartic.eval(&p, &s).unwrap(), max_relative = 1e-9, epsilon = 1e-9);
            assert!((g - g_from_full(&p, &s).unwrap()).abs() < 1e-8);
            assert!((r - r_from_full(&p, &s).unwrap()).abs() < 1e-12);
            assert!((r - r_printed_combination(&p, &s).unwrap()).abs() > 1e-6);
            // ψ-form agrees with the φ-form.
            let red = polar.reduce();
            let (h2, g2) = reduced_h_g(&red, &p).unwrap();
            assert!((h - h2).abs() < 1e-12 && (g - g2).abs() < 1e-12);
        }
    }

    #[test]
    fn polar_examples() {
        let p = params();
        let st = PolarLeafState::new([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.3, -1.0, 2.0]).unwrap();
        let (h, _, r) = reduced_invariants(&st, &p).unwrap();
        assert_eq!(r, 6.0);
        let (a, d) = (&p.a, &p.d);
        let poly = -0.25 * 14.0 + 0.25 * 14.0 + 0.25 * 36.0 + 0.5 * (a[0] - a[1]) * (d[0] + 2.0 * d[1] + 3.0 * d[2])
            + 0.25 * 36.0
            + 0.5 * (a[0] + a[1]) * (d[0] + 2.0 * d[1] + 3.0 * d[2]);
        assert_relative_eq!(h, poly, max_relative = 1e-14);
        assert!(matches!(
            PolarLeafState::new([1.0, 1.0, 1.0], [1.5, 0.0, 0.0], [0.0; 3]),
            Err(Error::Domain(_))
        ));
    }

    fn sample_reduced(rng: &mut ChaCha8Rng) -> ReducedState {
        loop {
            let s = WaveState::random(rng, 2, 3, 1.5);
            let red = reduce_full_state(&s).unwrap();
            let r = [red.r1, red.r2, red.r3()];
            if (0..3).all(|k| r[k].abs() < 0.95 * red.leaf.s[k]) {
                return red;
            }
        }
    }

    #[test]
    fn vector_field_is_hamiltonian() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let st = sample_reduced(&mut rng);
            let field = reduced_vector_field(&st, &p).unwrap();
            let h = |y: [f64; 4]| reduced_h_g(&st.with_coords(&y), &p).unwrap().0;
            let y = st.to_array();
            let e = 1e-6;
            let grad: Vec<f64> = (0..4)
                .map(|i| {
                    let (mut yp, mut ym) = (y, y);
                    yp[i] += e;
                    ym[i] -= e;
                    (h(yp) - h(ym)) / (2.0 * e)
                })
                .collect();
            let expected = [grad[2], grad[3], -grad[0], -grad[1]];
            for i in 0..4 {
                assert!((field[i] - expected[i]).abs() < 1e-8, "{i}: {} vs {}", field[i], expected[i]);
            }
        }
        let st = ReducedState::new(LeafParams::new([1.0, 1.2, 0.9], 0.3).unwrap(), 0.2, -0.1, 0.0, 0.0).unwrap();
        let f = reduced_vector_field(&st, &p).unwrap();
        assert_eq!((f[0], f[1]), (0.0, 0.0));
    }

    #[test]
    fn vector_field_pole_is_domain_error() {
        let p = params();
        let leaf = LeafParams::new([1.0, 1.0, 1.0], 0.5).unwrap();
        let st = ReducedState::new(leaf, 1.0, 0.0, 0.2, 0.1).unwrap();
        match reduced_vector_field(&st, &p) {
            Err(Error::Domain(msg)) => assert!(msg.contains("sphere 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pushforward_is_scaled_reduced_field() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let s = WaveState::random(&mut rng, 2, 3, 1.0);
            let zdot = WaveState::new(Observable::Quartic.vector_field(&p, &s).unwrap()).unwrap();
            let push = pushforward_velocity(&s, &zdot).unwrap();
            let field = reduced_vector_field(&reduce_full_state(&s).unwrap(), &p).unwrap();
            for i in 0..4 {
                assert!((push[i] - REDUCED_TIME_SCALE * field[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn darboux_involution_and_r_flow() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hgr = |k: usize| {
            let p = p.clone();
            move |st: &PolarLeafState| -> Result<f64> {
                let v = reduced_invariants(st, &p)?;
                Ok([v.0, v.1, v.2][k])
            }
        };
        for _ in 0..10 {
            let polar = sample_reduced(&mut rng).to_polar();
            for (i, j) in [(0, 1), (0, 2), (1, 2)] {
                let b = darboux_bracket_fd(hgr(i), hgr(j), &polar, 1e-5).unwrap();
                assert!(b.abs() < 1e-6, "({i},{j}): {b:e}");
            }
            // Flow of R: φ̇_k = −∂R/∂r_k = −1 for all k, ṙ = 0.
            let e = 1e-6;
            for k in 0..3 {
                let mut plus = polar;
                plus.r[k] += e;
                let (_, _, rp) = reduced_invariants(&plus, &p).unwrap();
                let (_, _, r0) = reduced_invariants(&polar, &p).unwrap();
                assert!(((rp - r0) / e - 1.0).abs() < 1e-8);
            }
            let mut shifted = polar;
            shifted.phi.iter_mut().for_each(|x| *x += 0.37);
            let (a, b) = (polar.reduce(), shifted.reduce());
            assert!((a.psi1 - b.psi1).abs() < 1e-12 && (a.psi2 - b.psi2).abs() < 1e-12);
        }
    }

    #[test]
    fn polar_bracket_has_factor_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = WaveState::random(&mut rng, 2, 3, 1.0);
        for k in 0..3 {
            for l in 0..3 {
                let b = poisson_bracket_fd(
                    move |z: &CMatrixOf<Extended>| z[(0, k)].norm_sqr() - z[(1, k)].norm_sqr(),
                    move |z: &CMatrixOf<Extended>| {
                        let e = z[(0, l)].conj() * z[(1, l)];
                        Extended::from(e.im.to_f64().atan2(e.re.to_f64()))
                    },
                    &s,
                    1e-7,
                )
                .unwrap();
                let expected = if k == l { REDUCED_TIME_SCALE } else { 0.0 };
                assert!((b - expected).abs() < 1e-5, "({k},{l}): {b}");
            }
        }
    }

    fn well_conditioned(rng: &mut ChaCha8Rng, p: &SystemParams) -> ReducedState {
        loop {
            let st = sample_reduced(rng);
            if angle_jacobian_det_ratio(&st.leaf, p, st.r1, st.r2, (st.psi1, st.psi2)).unwrap() > 0.2 {
                return st;
            }
        }
    }

    #[test]
    fn solve_angles_examples() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let st = well_conditioned(&mut rng, &p);
            let (h, g) = reduced_h_g(&st, &p).unwrap();
            let guess = (st.psi1 + rng.gen_range(-0.05..0.05), st.psi2 + rng.gen_range(-0.05..0.05));
            let (p1, p2) = solve_angles(st.r1, st.r2, (g, h), &st.leaf, &p, guess).unwrap();
            assert!((p1 - st.psi1).abs() < 1e-10 && (p2 - st.psi2).abs() < 1e-10);
        }
        let st = sample_reduced(&mut rng);
        let zero = st.with_coords(&[st.r1, st.r2, 0.0, 0.0]);
        let (h, g) = reduced_h_g(&zero, &p).unwrap();
        assert_eq!(solve_angles(st.r1, st.r2, (g, h), &st.leaf, &p, (0.0, 0.0)).unwrap(), (0.0, 0.0));
        let err = solve_angles(st.r1, st.r2, (g, h + 100.0), &st.leaf, &p, (0.1, 0.2)).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { .. }), "{err:?}");
    }

    /// Point at `(r1, r2)` on the level through `(0, 0, psi0)`, reached by
    /// continuation outward from the origin.
    fn on_origin_level(leaf: LeafParams, p: &SystemParams, psi0: (f64, f64), r1: f64, r2: f64) -> ReducedState {
        let origin = ReducedState::new(leaf, 0.0, 0.0, psi0.0, psi0.1).unwrap();
        let (h, g) = reduced_h_g(&origin, p).unwrap();
        let mut psi = psi0;
        for i in 1..=100 {
            let s = i as f64 / 100.0;
            psi = solve_angles(s * r1, s * r2, (g, h), &leaf, p, psi).unwrap();
        }
        ReducedState::new(leaf, r1, r2, psi.0, psi.1).unwrap()
    }

    #[test]
    fn generating_function_examples() {
        let p = params();
        let leaf = LeafParams::new([1.0, 1.2, 1.1], 0.1).unwrap();
        assert_eq!(generating_function(0.0, 0.0, 1.0, 2.0, &leaf, &p, (0.1, 0.2)).unwrap(), 0.0);

        let st = on_origin_level(leaf, &p, (0.9, -1.3), 0.12, -0.08);
        let (h, g) = reduced_h_g(&st, &p).unwrap();
        let guess = (st.psi1, st.psi2);
        let e = 1e-5;
        let plus = generating_function(st.r1 + e, st.r2, g, h, &leaf, &p, guess).unwrap();
        let minus = generating_function(st.r1 - e, st.r2, g, h, &leaf, &p, guess).unwrap();
        assert!(((plus - minus) / (2.0 * e) - st.psi1).abs() < 1e-6);
        let plus = generating_function(st.r1, st.r2 + e, g, h, &leaf, &p, guess).unwrap();
        let minus = generating_function(st.r1, st.r2 - e, g, h, &leaf, &p, guess).unwrap();
        assert!(((plus - minus) / (2.0 * e) - st.psi2).abs() < 1e-6);
    }

    #[test]
    fn generating_function_swap_symmetry() {
        let p = SystemParams::with_degenerate_spectra(vec![0.3, -0.8], vec![0.6, 0.6, -0.7], 0.0, 4).unwrap();
        let leaf = LeafParams::new([1.0, 1.0, 1.3], 0.2).unwrap();
        let st = on_origin_level(leaf, &p, (0.7, -0.4), 0.15, 0.15);
        let swapped = ReducedState::new(leaf, st.r2, st.r1, st.psi2, st.psi1).unwrap();
        let (h, g) = reduced_h_g(&st, &p).unwrap();
        let (h2, g2) = reduced_h_g(&swapped, &p).unwrap();
        assert!((h - h2).abs() < 1e-14 && (g - g2).abs() < 1e-14);
        let a = generating_function(st.r1, st.r2, g, h, &leaf, &p, (st.psi1, st.psi2)).unwrap();
        let b = generating_function(st.r2, st.r1, g, h, &leaf, &p, (st.psi2, st.psi1)).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} {b}");
    }

    #[test]
    fn lift_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let st = sample_reduced(&mut rng);
        let back = reduce_full_state(&lift_reduced(&st).unwrap()).unwrap();
        assert!((back.r1 - st.r1).abs() < 1e-12 && (back.r2 - st.r2).abs() < 1e-12);
        assert!((wrap_angle(back.psi1 - st.psi1)).abs() < 1e-12);
        assert!((back.leaf.r - st.leaf.r).abs() < 1e-12);
    }

    #[test]
    fn frozen_third_sphere() {
        let p = params();
        let leaf = LeafParams::new([1.0, 1.3, 0.0], 0.4).unwrap();
        assert!(leaf.third_sphere_frozen());
        let st = ReducedState::new(leaf, 0.1, 0.3, 0.8, 0.2).unwrap();
        let f = reduced_vector_field(&st, &p).unwrap();
        assert!((f[0] + f[1]).abs() < 1e-15);
        assert!(ReducedState::new(leaf, 0.1, 0.2, 0.8, 0.2).is_err());
    }
}
