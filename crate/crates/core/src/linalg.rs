//! Dense complex matrices, the block operator μ, and the finite-difference
//! Wirtinger gradient used as an independent oracle for every analytic
//! gradient and bracket in the crate.
//!
//! Gradient convention: for a functional `f` of the `n₊ × n₋` matrix `Z`,
//!
//! ```text
//! df = Tr((∂f/∂Z)·dZ) + Tr((∂f/∂Z⁺)·dZ⁺)
//! ```
//!
//! so `∂f/∂Z` is `n₋ × n₊`, `∂f/∂Z⁺` is `n₊ × n₋`, and `∂Tr(Z⁺Z)/∂Z⁺ = Z`.
//! Entrywise, `(∂f/∂Z⁺)ᵢⱼ = ∂f/∂z̄ᵢⱼ = ½(∂ₓ + i∂ᵧ)f` with `zᵢⱼ = x + iy`.

use std::fmt::Debug;
use std::ops::Neg;

use nalgebra::DMatrix;
use num_complex::{Complex, Complex64};
use num_traits::{Num, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use crate::error::{Error, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative tolerance used when a matrix is required to be Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-12;

/// Double-double scalar used when finite differences need more than 53 bits.
pub type Extended = TwoFloat;

pub type CMatrix = DMatrix<Complex64>;
pub type CMatrixOf<T> = DMatrix<Complex<T>>;

/// Real scalar type the trace polynomials can be evaluated in.
pub trait Real:
    Copy + Debug + PartialOrd + Num + Neg<Output = Self> + From<f64> + Send + Sync + 'static
{
    fn to_f64(self) -> f64;
}

impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

impl Real for TwoFloat {
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

/// Lift an `f64` complex matrix into another scalar type.
pub fn lift<T: Real>(m: &CMatrix) -> CMatrixOf<T> {
    m.map(|c| Complex::new(T::from(c.re), T::from(c.im)))
}

/// Fixed diagonal blocks and hierarchy indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Diagonal of `A` (length `n₊`).
    pub a: Vec<f64>,
    /// Diagonal of `D` (length `n₋`).
    pub d: Vec<f64>,
    pub lambda: f64,
    pub k: u32,
}

impl SystemParams {
    /// Builds parameters, requiring pairwise distinct entries in `a` and in `d`.
    pub fn new(a: Vec<f64>, d: Vec<f64>, lambda: f64, k: u32) -> Result<Self> {
        let params = Self::with_degenerate_spectra(a, d, lambda, k)?;
        if let Some(msg) = params.spectrum_violation() {
            return Err(Error::Validation(msg));
        }
        Ok(params)
    }

    /// Like [`SystemParams::new`] but accepts repeated eigenvalues of `A` or `D`.
    pub fn with_degenerate_spectra(a: Vec<f64>, d: Vec<f64>, lambda: f64, k: u32) -> Result<Self> {
        if a.is_empty() || d.is_empty() {
            return Err(Error::Validation(format!(
                "need n+ >= 1 and n- >= 1, got {} and {}",
                a.len(),
                d.len()
            )));
        }
        if k == 0 {
            return Err(Error::Validation("hierarchy index k must be >= 1".into()));
        }
        if !a.iter().chain(d.iter()).all(|x| x.is_finite()) || !lambda.is_finite() {
            return Err(Error::Validation("parameters must be finite".into()));
        }
        Ok(Self { a, d, lambda, k })
    }

    pub fn n_plus(&self) -> usize {
        self.a.len()
    }

    pub fn n_minus(&self) -> usize {
        self.d.len()
    }

    /// Describes a repeated eigenvalue of `A` or `D`, if any.
    pub fn spectrum_violation(&self) -> Option<String> {
        fn repeated(v: &[f64]) -> Option<(usize, usize)> {
            for i in 0..v.len() {
                for j in i + 1..v.len() {
                    if v[i] == v[j] {
                        return Some((i, j));
                    }
                }
            }
            None
        }
        if let Some((i, j)) = repeated(&self.a) {
            return Some(format!("a[{i}] == a[{j}] = {}", self.a[i]));
        }
        if let Some((i, j)) = repeated(&self.d) {
            return Some(format!("d[{i}] == d[{j}] = {}", self.d[i]));
        }
        None
    }

    pub fn with_index(&self, k: u32, lambda: f64) -> Self {
        Self {
            k,
            lambda,
            ..self.clone()
        }
    }

    pub(crate) fn check_state(&self, state: &WaveState) -> Result<()> {
        let (r, c) = state.z.shape();
        if r != self.n_plus() || c != self.n_minus() {
            return Err(Error::Dimension(format!(
                "state is {r}x{c}, parameters expect {}x{}",
                self.n_plus(),
                self.n_minus()
            )));
        }
        Ok(())
    }
}

/// The dynamical variable: the `n₊ × n₋` upper-right block of μ.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveState {
    pub z: CMatrix,
}

impl WaveState {
    pub fn new(z: CMatrix) -> Result<Self> {
        if z.nrows() == 0 || z.ncols() == 0 {
            return Err(Error::Dimension("state must have at least one row and column".into()));
        }
        Ok(Self { z })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            z: CMatrix::zeros(rows, cols),
        }
    }

    pub fn from_rows(rows: &[Vec<Complex64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(CMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.z.shape()
    }

    /// Row-major interleaved `[Re z₁₁, Im z₁₁, Re z₁₂, …]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let (n, m) = self.shape();
        let mut out = Vec::with_capacity(2 * n * m);
        for i in 0..n {
            for j in 0..m {
                let c = self.z[(i, j)];
                out.push(c.re);
                out.push(c.im);
            }
        }
        out
    }

    pub fn from_flat(rows: usize, cols: usize, y: &[f64]) -> Result<Self> {
        if y.len() != 2 * rows * cols {
            return Err(Error::Dimension(format!(
                "flat state has {} reals, expected {}",
                y.len(),
                2 * rows * cols
            )));
        }
        Self::new(CMatrix::from_fn(rows, cols, |i, j| {
            let p = 2 * (i * cols + j);
            Complex64::new(y[p], y[p + 1])
        }))
    }

    /// Coordinate names matching [`WaveState::to_flat`], e.g. `z12_re`.
    pub fn coordinate_names(rows: usize, cols: usize) -> Vec<String> {
        let mut names = Vec::with_capacity(2 * rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                names.push(format!("z{}{}_re", i + 1, j + 1));
                names.push(format!("z{}{}_im", i + 1, j + 1));
            }
        }
        names
    }

    /// Entries drawn uniformly from the complex disc of radius `scale`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Self {
        let z = CMatrix::from_fn(rows, cols, |_, _| {
            let radius = scale * rng.gen::<f64>().sqrt();
            let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            Complex64::from_polar(radius, angle)
        });
        Self { z }
    }
}

/// `[[diag(a) + shift·I, Z], [Z⁺, diag(d)]]` in any scalar type.
pub fn assemble_shifted<T: Real>(a: &[f64], d: &[f64], shift: f64, z: &CMatrixOf<T>) -> CMatrixOf<T> {
    let (np, nm) = (a.len(), d.len());
    let n = np + nm;
    CMatrixOf::<T>::from_fn(n, n, |i, j| match (i < np, j < np) {
        (true, true) if i == j => Complex::new(T::from(a[i] + shift), T::zero()),
        (false, false) if i == j => Complex::new(T::from(d[i - np]), T::zero()),
        (true, false) => z[(i, j - np)],
        (false, true) => z[(j, i - np)].conj(),
        _ => Complex::zero(),
    })
}

/// The Hermitian block operator μ.
pub fn assemble_mu(params: &SystemParams, state: &WaveState) -> Result<CMatrix> {
    params.check_state(state)?;
    Ok(assemble_shifted(&params.a, &params.d, 0.0, &state.z))
}

/// Dense product in any scalar type.
pub fn matmul<T: Real>(a: &CMatrixOf<T>, b: &CMatrixOf<T>) -> CMatrixOf<T> {
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions differ");
    CMatrixOf::<T>::from_fn(a.nrows(), b.ncols(), |i, j| {
        (0..a.ncols()).fold(Complex::zero(), |acc, l| acc + a[(i, l)] * b[(l, j)])
    })
}

/// `M^k` by repeated multiplication; `M⁰ = I`.
pub fn matrix_power<T: Real>(m: &CMatrixOf<T>, k: u32) -> CMatrixOf<T> {
    let n = m.nrows();
    if k == 0 {
        return CMatrixOf::<T>::from_fn(n, n, |i, j| if i == j { Complex::new(T::one(), T::zero()) } else { Complex::zero() });
    }
    let mut out = m.clone();
    for _ in 1..k {
        out = matmul(&out, m);
    }
    out
}

/// Conjugate transpose in any scalar type.
pub fn adjoint<T: Real>(m: &CMatrixOf<T>) -> CMatrixOf<T> {
    CMatrixOf::<T>::from_fn(m.ncols(), m.nrows(), |i, j| m[(j, i)].conj())
}

pub fn trace<T: Real>(m: &CMatrixOf<T>) -> Complex<T> {
    (0..m.nrows().min(m.ncols())).fold(Complex::zero(), |acc, i| acc + m[(i, i)])
}

/// `max |M − M⁺|`.
pub fn hermitian_defect(m: &CMatrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0f64, |acc, c| acc.max(c.norm()))
}

pub fn is_hermitian(m: &CMatrix, rel_tol: f64) -> bool {
    m.is_square() && hermitian_defect(m) <= rel_tol * max_abs(m)
}

/// `Tr(Mᵏ)` for Hermitian `M`.
pub fn trace_power(m: &CMatrix, k: u32) -> Result<f64> {
    trace_power_with_tol(m, k, HERMITIAN_TOL)
}

pub fn trace_power_with_tol(m: &CMatrix, k: u32, rel_tol: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::Validation("power must be positive".into()));
    }
    if !m.is_square() {
        return Err(Error::Dimension(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    if !is_hermitian(m, rel_tol) {
        return Err(Error::Validation(format!(
            "matrix is not Hermitian (defect {:e})",
            hermitian_defect(m)
        )));
    }
    let t = trace(&matrix_power(m, k));
    // Scale for the imaginary residue: ‖M‖ᵏ bounds every term of the trace.
    let scale = t.re.abs().max(m.norm().powi(k as i32));
    if t.im.abs() > 1e-10 * scale {
        return Err(Error::Numerical(format!(
            "trace of Hermitian power has imaginary part {:e}",
            t.im
        )));
    }
    Ok(t.re)
}

/// Finite-difference Wirtinger gradients of a functional.
#[derive(Debug, Clone, PartialEq)]
pub struct WirtingerGradient {
    /// `∂f/∂Z`, shape `n₋ × n₊`.
    pub d_dz: CMatrix,
    /// `∂f/∂Z⁺`, shape `n₊ × n₋`.
    pub d_dzplus: CMatrix,
}

/// Entrywise `(∂f/∂zᵢⱼ, ∂f/∂z̄ᵢⱼ)` kept in the evaluation scalar.
struct Partials<T: Real> {
    dz: Vec<Complex<T>>,
    dzbar: Vec<Complex<T>>,
}

fn fd_partials<T, F>(f: F, z: &CMatrix, h: f64) -> Result<Partials<T>>
where
    T: Real,
    F: Fn(&CMatrixOf<T>) -> Complex<T>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Validation(format!("finite-difference step must be positive, got {h}")));
    }
    let (n, m) = z.shape();
    let base = lift::<T>(z);
    let step = T::from(h);
    let half = T::from(0.5);
    let two_h = T::from(2.0 * h);
    let mut probe = base.clone();
    let eval = |probe: &CMatrixOf<T>, row: usize, col: usize, label: &'static str| -> Result<Complex<T>> {
        let v = f(probe);
        let (re, im) = (v.re.to_f64(), v.im.to_f64());
        if !re.is_finite() || !im.is_finite() {
            return Err(Error::NonFiniteProbe {
                row,
                col,
                probe: label,
                value: if re.is_finite() { im } else { re },
            });
        }
        Ok(v)
    };
    let mut dz = Vec::with_capacity(n * m);
    let mut dzbar = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let orig = base[(i, j)];
            probe[(i, j)] = Complex::new(orig.re + step, orig.im);
            let xp = eval(&probe, i, j, "+re")?;
            probe[(i, j)] = Complex::new(orig.re - step, orig.im);
            let xm = eval(&probe, i, j, "-re")?;
            probe[(i, j)] = Complex::new(orig.re, orig.im + step);
            let yp = eval(&probe, i, j, "+im")?;
            probe[(i, j)] = Complex::new(orig.re, orig.im - step);
            let ym = eval(&probe, i, j, "-im")?;
            probe[(i, j)] = orig;

            let fx = (xp - xm).unscale(two_h);
            let fy = (yp - ym).unscale(two_h);
            let i_fy = Complex::new(-fy.im, fy.re);
            dz.push((fx - i_fy).scale(half));
            dzbar.push((fx + i_fy).scale(half));
        }
    }
    Ok(Partials { dz, dzbar })
}

fn to_f64_complex<T: Real>(c: Complex<T>) -> Complex64 {
    Complex64::new(c.re.to_f64(), c.im.to_f64())
}

/// Central-difference Wirtinger gradient of a real functional.
///
/// The functional is evaluated in the scalar type `T`; use [`Extended`] when
/// roundoff in `f` would dominate the difference quotients.
pub fn wirtinger_gradient_fd<T, F>(f: F, state: &WaveState, h: f64) -> Result<WirtingerGradient>
where
    T: Real,
    F: Fn(&CMatrixOf<T>) -> T,
{
    wirtinger_gradient_fd_complex(|z: &CMatrixOf<T>| Complex::new(f(z), T::zero()), state, h)
}

/// As [`wirtinger_gradient_fd`] for complex-valued functionals.
pub fn wirtinger_gradient_fd_complex<T, F>(f: F, state: &WaveState, h: f64) -> Result<WirtingerGradient>
where
    T: Real,
    F: Fn(&CMatrixOf<T>) -> Complex<T>,
{
    let (n, m) = state.shape();
    let p = fd_partials(f, &state.z, h)?;
    let d_dz = CMatrix::from_fn(m, n, |j, i| to_f64_complex(p.dz[i * m + j]));
    let d_dzplus = CMatrix::from_fn(n, m, |i, j| to_f64_complex(p.dzbar[i * m + j]));
    Ok(WirtingerGradient { d_dz, d_dzplus })
}

/// `i Σ (∂f/∂zᵢⱼ ∂g/∂z̄ᵢⱼ − ∂g/∂zᵢⱼ ∂f/∂z̄ᵢⱼ)` together with the sum of term magnitudes.
fn bracket_sum<T: Real>(f: &Partials<T>, g: &Partials<T>) -> (Complex<T>, f64) {
    let mut acc = Complex::<T>::zero();
    let mut mag = 0.0;
    for idx in 0..f.dz.len() {
        let term = f.dz[idx] * g.dzbar[idx] - g.dz[idx] * f.dzbar[idx];
        mag += to_f64_complex(f.dz[idx] * g.dzbar[idx]).norm() + to_f64_complex(g.dz[idx] * f.dzbar[idx]).norm();
        acc = acc + term;
    }
    (Complex::new(-acc.im, acc.re), mag)
}

/// Finite-difference Poisson bracket `{f, g} = i Tr(∂f/∂Z ∂g/∂Z⁺ − ∂g/∂Z ∂f/∂Z⁺)` of
/// real functionals.
pub fn poisson_bracket_fd<T, F, G>(f: F, g: G, state: &WaveState, h: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&CMatrixOf<T>) -> T,
    G: Fn(&CMatrixOf<T>) -> T,
{
    let pf = fd_partials(|z: &CMatrixOf<T>| Complex::new(f(z), T::zero()), &state.z, h)?;
    let pg = fd_partials(|z: &CMatrixOf<T>| Complex::new(g(z), T::zero()), &state.z, h)?;
    let (b, mag) = bracket_sum(&pf, &pg);
    let b = to_f64_complex(b);
    if b.im.abs() > 1e-9 * mag.max(1.0) {
        return Err(Error::Numerical(format!(
            "bracket of real functionals has imaginary part {:e}",
            b.im
        )));
    }
    Ok(b.re)
}

/// Finite-difference Poisson bracket of complex-valued functionals.
pub fn poisson_bracket_fd_complex<T, F, G>(f: F, g: G, state: &WaveState, h: f64) -> Result<Complex64>
where
    T: Real,
    F: Fn(&CMatrixOf<T>) -> Complex<T>,
    G: Fn(&CMatrixOf<T>) -> Complex<T>,
{
    let pf = fd_partials(f, &state.z, h)?;
    let pg = fd_partials(g, &state.z, h)?;
    Ok(to_f64_complex(bracket_sum(&pf, &pg).0))
}

/// Brackets of one functional against many, reusing its gradient.
pub fn poisson_bracket_table_fd<T, F>(fs: &[F], state: &WaveState, h: f64) -> Result<Vec<Vec<f64>>>
where
    T: Real,
    F: Fn(&CMatrixOf<T>) -> T,
{
    let partials = fs
        .iter()
        .map(|f| fd_partials(|z: &CMatrixOf<T>| Complex::new(f(z), T::zero()), &state.z, h))
        .collect::<Result<Vec<_>>>()?;
    let n = partials.len();
    let mut table = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (b, mag) = bracket_sum(&partials[i], &partials[j]);
            let b = to_f64_complex(b);
            if b.im.abs() > 1e-9 * mag.max(1.0) {
                return Err(Error::Numerical(format!(
                    "bracket ({i}, {j}) has imaginary part {:e}",
                    b.im
                )));
            }
            table[i][j] = b.re;
        }
    }
    Ok(table)
}
