//! Hierarchy Hamiltonians `H_{k,λ} = Tr((μ + λP₊)ᵏ)`, the Manley–Rowe
//! integrals `α_k`, `δ_k`, the quartic/quintic pair `H`, `F`, their analytic
//! gradients `∂/∂Z⁺` and the Hamiltonian vector fields `Ż = i ∂H/∂Z⁺`.

use std::fmt;
use std::sync::Arc;

use num_complex::{Complex, Complex64};

use crate::error::{Error, Result};
use crate::linalg::{
    adjoint, assemble_shifted, lift, matmul, matrix_power, trace, CMatrix, CMatrixOf, Real, SystemParams,
    WaveState,
};

/// A real functional on the full phase space that has a closed-form gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observable {
    /// `H_{k,λ} = Tr((μ + λP₊)ᵏ)`.
    Hierarchy { k: u32, lambda: f64 },
    /// `α_k = Tr(AᵏZZ⁺)`.
    Alpha(u32),
    /// `δ_k = Tr(DᵏZ⁺Z)`.
    Delta(u32),
    /// `H = ½Tr((Z⁺Z)²) + Tr(AZDZ⁺)`.
    Quartic,
    /// `F = Tr(A(ZZ⁺)²) + Tr(D(Z⁺Z)²) + Tr(D²Z⁺AZ + DZ⁺A²Z)`.
    Quintic,
    /// Squared norm of column `j` (0-based) of `Z`; the sphere radius `s_{j+1}`.
    ColumnNorm(usize),
}

impl fmt::Display for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observable::Hierarchy { k, lambda } => write!(f, "H_{k}_{lambda}"),
            Observable::Alpha(k) => write!(f, "alpha{k}"),
            Observable::Delta(k) => write!(f, "delta{k}"),
            Observable::Quartic => write!(f, "H"),
            Observable::Quintic => write!(f, "F"),
            Observable::ColumnNorm(j) => write!(f, "s{}", j + 1),
        }
    }
}

fn diag_left<T: Real>(weights: &[f64], m: &CMatrixOf<T>) -> CMatrixOf<T> {
    CMatrixOf::<T>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)].scale(T::from(weights[i])))
}

fn diag_right<T: Real>(m: &CMatrixOf<T>, weights: &[f64]) -> CMatrixOf<T> {
    CMatrixOf::<T>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)].scale(T::from(weights[j])))
}

fn powers(v: &[f64], k: u32) -> Vec<f64> {
    v.iter().map(|x| x.powi(k as i32)).collect()
}

fn re_trace<T: Real>(m: &CMatrixOf<T>) -> T {
    trace(m).re
}

impl Observable {
    pub fn name(&self) -> String {
        self.to_string()
    }

    /// Evaluates the functional for diagonal blocks `a`, `d` in scalar type `T`.
    pub fn eval_with<T: Real>(&self, a: &[f64], d: &[f64], z: &CMatrixOf<T>) -> T {
        match *self {
            Observable::Hierarchy { k, lambda } => {
                re_trace(&matrix_power(&assemble_shifted(a, d, lambda, z), k))
            }
            Observable::Alpha(k) => {
                let zzh = matmul(z, &adjoint(z));
                re_trace(&diag_left(&powers(a, k), &zzh))
            }
            Observable::Delta(k) => {
                let zhz = matmul(&adjoint(z), z);
                re_trace(&diag_left(&powers(d, k), &zhz))
            }
            Observable::Quartic => {
                let zh = adjoint(z);
                let zhz = matmul(&zh, z);
                let quartic = re_trace(&matmul(&zhz, &zhz));
                let coupling = re_trace(&matmul(&diag_right(&diag_left(a, z), d), &zh));
                T::from(0.5) * quartic + coupling
            }
            Observable::Quintic => {
                let zh = adjoint(z);
                let zzh = matmul(z, &zh);
                let zhz = matmul(&zh, z);
                let a2 = powers(a, 2);
                let d2 = powers(d, 2);
                let t1 = re_trace(&diag_left(a, &matmul(&zzh, &zzh)));
                let t2 = re_trace(&diag_left(d, &matmul(&zhz, &zhz)));
                let t3 = re_trace(&matmul(&diag_left(&d2, &zh), &diag_left(a, z)));
                let t4 = re_trace(&matmul(&diag_left(d, &zh), &diag_left(&a2, z)));
                t1 + t2 + t3 + t4
            }
            Observable::ColumnNorm(j) => (0..z.nrows()).fold(T::zero(), |acc, i| acc + z[(i, j)].norm_sqr()),
        }
    }

    pub fn eval(&self, params: &SystemParams, state: &WaveState) -> Result<f64> {
        self.check(params, state)?;
        Ok(self.eval_with::<f64>(&params.a, &params.d, &state.z))
    }

    /// Analytic `∂f/∂Z⁺` (shape `n₊ × n₋`).
    pub fn grad(&self, params: &SystemParams, state: &WaveState) -> Result<CMatrix> {
        self.check(params, state)?;
        let (a, d, z) = (&params.a[..], &params.d[..], &state.z);
        let zh = z.adjoint();
        Ok(match *self {
            Observable::Hierarchy { k, lambda } => hierarchy_gradient(a, d, k, lambda, z),
            Observable::Alpha(k) => diag_left(&powers(a, k), z),
            Observable::Delta(k) => diag_right(z, &powers(d, k)),
            Observable::Quartic => diag_right(&diag_left(a, z), d) + z * &zh * z,
            Observable::Quintic => {
                let az = diag_left(a, z);
                let zd = diag_right(z, d);
                z * &zh * &az
                    + &az * &zh * z
                    + z * &zh * &zd
                    + &zd * &zh * z
                    + diag_right(&az, &powers(d, 2))
                    + diag_right(&diag_left(&powers(a, 2), z), d)
            }
            Observable::ColumnNorm(j) => {
                let mut g = CMatrix::zeros(z.nrows(), z.ncols());
                g.set_column(j, &z.column(j));
                g
            }
        })
    }

    /// `Ż = i ∂f/∂Z⁺`.
    pub fn vector_field(&self, params: &SystemParams, state: &WaveState) -> Result<CMatrix> {
        Ok(self.grad(params, state)? * Complex64::i())
    }

    fn check(&self, params: &SystemParams, state: &WaveState) -> Result<()> {
        params.check_state(state)?;
        match *self {
            Observable::Hierarchy { k: 0, .. } => Err(Error::Validation("hierarchy index must be >= 1".into())),
            Observable::ColumnNorm(j) if j >= params.n_minus() => Err(Error::Dimension(format!(
                "column {j} out of range for {} columns",
                params.n_minus()
            ))),
            _ => Ok(()),
        }
    }
}

/// `k · [upper-right block of (μ + λP₊)^{k−1}]`.
fn hierarchy_gradient(a: &[f64], d: &[f64], k: u32, lambda: f64, z: &CMatrix) -> CMatrix {
    let (np, nm) = z.shape();
    if k == 1 {
        return CMatrix::zeros(np, nm);
    }
    let shifted = assemble_shifted::<f64>(a, d, lambda, z);
    let p = matrix_power(&shifted, k - 1);
    p.view((0, np), (np, nm)).into_owned() * Complex64::new(k as f64, 0.0)
}

/// `H_{k,λ}` with `k`, `λ` taken from the parameters.
pub fn h_k_lambda(params: &SystemParams, state: &WaveState) -> Result<f64> {
    Observable::Hierarchy {
        k: params.k,
        lambda: params.lambda,
    }
    .eval(params, state)
}

/// `∂H_{k,λ}/∂Z⁺`.
pub fn grad_h_k_lambda(params: &SystemParams, state: &WaveState) -> Result<CMatrix> {
    Observable::Hierarchy {
        k: params.k,
        lambda: params.lambda,
    }
    .grad(params, state)
}

/// `(α_k, δ_k)`.
pub fn manley_rowe(params: &SystemParams, state: &WaveState, k: u32) -> Result<(f64, f64)> {
    Ok((Observable::Alpha(k).eval(params, state)?, Observable::Delta(k).eval(params, state)?))
}

/// `(H, F)`.
pub fn quartic_quintic(params: &SystemParams, state: &WaveState) -> Result<(f64, f64)> {
    Ok((Observable::Quartic.eval(params, state)?, Observable::Quintic.eval(params, state)?))
}

/// `Ż = i(AZD + ZZ⁺Z)`.
pub fn quartic_vector_field(params: &SystemParams, state: &WaveState) -> Result<CMatrix> {
    Observable::Quartic.vector_field(params, state)
}

/// `Ż = i ∂H_{k,λ}/∂Z⁺`.
pub fn hierarchy_vector_field(params: &SystemParams, state: &WaveState) -> Result<CMatrix> {
    Observable::Hierarchy {
        k: params.k,
        lambda: params.lambda,
    }
    .vector_field(params, state)
}

/// Evaluates `f` at `state` in double-double arithmetic.
pub fn eval_extended(obs: &Observable, params: &SystemParams, state: &WaveState) -> f64 {
    obs.eval_with::<crate::linalg::Extended>(&params.a, &params.d, &lift(&state.z))
        .to_f64()
}

type FlatFn = dyn Fn(&[f64]) -> Result<f64> + Send + Sync;

/// A named real functional on flattened states.
#[derive(Clone)]
pub struct NamedFunctional {
    pub name: String,
    f: Arc<FlatFn>,
}

impl NamedFunctional {
    pub fn new<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&[f64]) -> Result<f64> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn eval(&self, y: &[f64]) -> Result<f64> {
        (self.f)(y)
    }
}

impl fmt::Debug for NamedFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NamedFunctional").field("name", &self.name).finish()
    }
}

/// Ordered list of uniquely named functionals.
#[derive(Debug, Clone, Default)]
pub struct InvariantSet {
    items: Vec<NamedFunctional>,
}

impl InvariantSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, item: NamedFunctional) -> Result<()> {
        if self.items.iter().any(|it| it.name == item.name) {
            return Err(Error::Validation(format!("duplicate invariant name {}", item.name)));
        }
        self.items.push(item);
        Ok(())
    }

    pub fn with(mut self, item: NamedFunctional) -> Result<Self> {
        self.push(item)?;
        Ok(self)
    }

    /// Full-space observables evaluated on row-major interleaved states.
    pub fn from_observables(params: &SystemParams, observables: &[Observable]) -> Result<Self> {
        let mut set = Self::new();
        let (rows, cols) = (params.n_plus(), params.n_minus());
        for obs in observables {
            let (obs, params) = (*obs, params.clone());
            set.push(NamedFunctional::new(obs.name(), move |y| {
                obs.eval(&params, &WaveState::from_flat(rows, cols, y)?)
            }))?;
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.items.iter().map(|it| it.name.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedFunctional> {
        self.items.iter()
    }
}

/// The integrals monitored along quartic flows: `H, F, α₀, α₁, α₂, δ₁, δ₂` and
/// the column norms.
pub fn standard_invariants(params: &SystemParams) -> Vec<Observable> {
    let mut out = vec![
        Observable::Quartic,
        Observable::Quintic,
        Observable::Alpha(0),
        Observable::Alpha(1),
        Observable::Alpha(2),
        Observable::Delta(1),
        Observable::Delta(2),
    ];
    out.extend((0..params.n_minus()).map(Observable::ColumnNorm));
    out
}

/// `Tr(ZZ⁺)`, shared by `α₀` and `δ₀`.
pub fn total_intensity(state: &WaveState) -> f64 {
    state.z.iter().map(Complex::norm_sqr).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{wirtinger_gradient_fd, Extended, FD_STEP};
    use approx::assert_relative_eq;
    use num_traits::Zero;
    use nalgebra::SymmetricEigen;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params23() -> SystemParams {
        SystemParams::new(vec![0.3, -0.8], vec![0.5, 1.1, -0.7], 0.0, 4).unwrap()
    }

    fn eigen_power_sum(m: &CMatrix, k: u32) -> f64 {
        SymmetricEigen::new(m.clone()).eigenvalues.iter().map(|e| e.powi(k as i32)).sum()
    }

    #[test]
    fn first_power_is_shifted_trace() {
        let p = SystemParams::new(vec![1.0, 2.0], vec![3.0, 4.0, 5.0], 2.0, 1).unwrap();
        let s = WaveState::random(&mut ChaCha8Rng::seed_from_u64(1), 2, 3, 2.0);
        assert_relative_eq!(h_k_lambda(&p, &s).unwrap(), 19.0, max_relative = 1e-15);
    }

    #[test]
    fn second_power_scalar_case() {
        let p = SystemParams::new(vec![1.0], vec![1.0], 0.0, 2).unwrap();
        let s = WaveState::from_rows(&[vec![Complex64::new(1.0, 0.0)]]).unwrap();
        assert_eq!(h_k_lambda(&p, &s).unwrap(), 4.0);
    }

    #[test]
    fn fifth_power_matches_spectrum() {
        let p = params23().with_index(5, 0.7);
        let s = WaveState::random(&mut ChaCha8Rng::seed_from_u64(2), 2, 3, 1.0);
        let shifted = assemble_shifted::<f64>(&p.a, &p.d, 0.7, &s.z);
        assert_relative_eq!(h_k_lambda(&p, &s).unwrap(), eigen_power_sum(&shifted, 5), max_relative = 1e-9);
    }

    #[test]
    fn gradient_examples() {
        let p = params23();
        let zero = WaveState::zeros(2, 3);
        for k in 1..6 {
            let g = grad_h_k_lambda(&p.with_index(k, -0.4), &zero).unwrap();
            assert!(g.iter().all(|c| c.norm() == 0.0));
        }
        let s = WaveState::random(&mut ChaCha8Rng::seed_from_u64(3), 2, 3, 1.0);
        let g = grad_h_k_lambda(&p.with_index(2, 0.9), &s).unwrap();
        assert!((g - &s.z * Complex64::new(2.0, 0.0)).iter().all(|c| c.norm() < 1e-14));
    }

    #[test]
    fn analytic_gradients_match_fd() {
        let p = params23();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let observables = [
            Observable::Hierarchy { k: 4, lambda: -1.3 },
            Observable::Hierarchy { k: 5, lambda: 0.7 },
            Observable::Alpha(2),
            Observable::Delta(3),
            Observable::Quartic,
            Observable::Quintic,
            Observable::ColumnNorm(1),
        ];
        for _ in 0..5 {
            let s = WaveState::random(&mut rng, 2, 3, 1.0);
            for obs in observables {
                let fd = wirtinger_gradient_fd(|z: &CMatrixOf<Extended>| obs.eval_with(&p.a, &p.d, z), &s, FD_STEP)
                    .unwrap();
                let an = obs.grad(&p, &s).unwrap();
                let err = (&fd.d_dzplus - &an).iter().fold(0.0f64, |m, c| m.max(c.norm()));
                assert!(err < 1e-6, "{obs}: {err:e}");
                // Real functional: ∂f/∂Z is the adjoint of ∂f/∂Z⁺.
                let err_adj = (&fd.d_dz - an.adjoint()).iter().fold(0.0f64, |m, c| m.max(c.norm()));
                assert!(err_adj < 1e-6, "{obs}: {err_adj:e}");
            }
        }
    }

    #[test]
    fn manley_rowe_examples() {
        let p = SystemParams::new(vec![2.0], vec![3.0], 0.0, 1).unwrap();
        let s = WaveState::from_rows(&[vec![Complex64::new(2.0, 0.0)]]).unwrap();
        assert_eq!(manley_rowe(&p, &s, 1).unwrap(), (8.0, 12.0));
        let p = params23();
        let s = WaveState::random(&mut ChaCha8Rng::seed_from_u64(5), 2, 3, 1.0);
        let (a0, d0) = manley_rowe(&p, &s, 0).unwrap();
        assert_relative_eq!(a0, total_intensity(&s), max_relative = 1e-14);
        assert_relative_eq!(d0, total_intensity(&s), max_relative = 1e-14);
    }

    #[test]
    fn quartic_scalar_case_and_zero() {
        let (a, d) = (0.7, -1.2);
        let p = SystemParams::new(vec![a], vec![d], 0.0, 1).unwrap();
        let z = Complex64::new(0.6, -0.9);
        let s = WaveState::from_rows(&[vec![z]]).unwrap();
        let (h, _) = quartic_quintic(&p, &s).unwrap();
        assert_relative_eq!(h, 0.5 * z.norm_sqr().powi(2) + a * d * z.norm_sqr(), max_relative = 1e-14);
        assert_eq!(quartic_quintic(&params23(), &WaveState::zeros(2, 3)).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn quartic_matches_vector_form() {
        let p = params23();
        let s = WaveState::random(&mut ChaCha8Rng::seed_from_u64(6), 2, 3, 1.0);
        let z: Vec<Complex64> = s.z.row(0).iter().copied().collect();
        let v: Vec<Complex64> = s.z.row(1).iter().copied().collect();
        let dot = |x: &[Complex64], y: &[Complex64]| x.iter().zip(y).map(|(a, b)| a.conj() * b).sum::<Complex64>();
        let dz: Vec<Complex64> = z.iter().zip(&p.d).map(|(x, d)| x * d).collect();
        let dv: Vec<Complex64> = v.iter().zip(&p.d).map(|(x, d)| x * d).collect();
        let expected = 0.5 * dot(&z, &z).re.powi(2)
            + 0.5 * dot(&v, &v).re.powi(2)
            + dot(&v, &z).norm_sqr()
            + p.a[0] * dot(&z, &dz).re
            + p.a[1] * dot(&v, &dv).re;
        assert_relative_eq!(Observable::Quartic.eval(&p, &s).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn quintic_matches_vector_form() {
        let p = params23();
        let s = WaveState::random(&mut ChaCha8Rng::seed_from_u64(8), 2, 3, 1.0);
        let z: Vec<Complex64> = s.z.row(0).iter().copied().collect();
        let v: Vec<Complex64> = s.z.row(1).iter().copied().collect();
        let dot = |x: &[Complex64], y: &[Complex64]| x.iter().zip(y).map(|(a, b)| a.conj() * b).sum::<Complex64>();
        let scale = |x: &[Complex64], w: f64| -> Vec<Complex64> {
            x.iter().zip(&p.d).map(|(c, d)| c * d.powf(w)).collect()
        };
        let (a1, a2) = (p.a[0], p.a[1]);
        let (dz, dv, d2z, d2v) = (scale(&z, 1.0), scale(&v, 1.0), scale(&z, 2.0), scale(&v, 2.0));
        let expected = a1 * dot(&z, &z).re.powi(2)
            + a2 * dot(&v, &v).re.powi(2)
            + (a1 + a2) * dot(&v, &z).norm_sqr()
            + (dot(&z, &z) * dot(&z, &dz)).re
            + (dot(&v, &v) * dot(&v, &dv)).re
            + (dot(&v, &z) * dot(&z, &dv)).re
            + (dot(&z, &v) * dot(&v, &dz)).re
            + a1 * a1 * dot(&z, &dz).re
            + a2 * a2 * dot(&v, &dv).re
            + a1 * dot(&z, &d2z).re
            + a2 * dot(&v, &d2v).re;
        assert_relative_eq!(Observable::Quintic.eval(&p, &s).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn quintic_is_fifth_power_minus_manley_rowe() {
        // F = (H_{5,0} − Tr A⁵ − Tr D⁵ − 5α₃ − 5δ₃) / 5
        let p = params23();
        let s = WaveState::random(&mut ChaCha8Rng::seed_from_u64(9), 2, 3, 1.0);
        let h5 = Observable::Hierarchy { k: 5, lambda: 0.0 }.eval(&p, &s).unwrap();
        let consts: f64 = p.a.iter().chain(&p.d).map(|x| x.powi(5)).sum();
        let (a3, d3) = manley_rowe(&p, &s, 3).unwrap();
        let f = Observable::Quintic.eval(&p, &s).unwrap();
        assert_relative_eq!(f, (h5 - consts - 5.0 * a3 - 5.0 * d3) / 5.0, max_relative = 1e-11);
    }

    #[test]
    fn quartic_field_examples() {
        let p = SystemParams::new(vec![1.0], vec![1.0], 0.0, 1).unwrap();
        let s = WaveState::from_rows(&[vec![Complex64::new(1.0, 0.0)]]).unwrap();
        let f = quartic_vector_field(&p, &s).unwrap();
        assert!((f[(0, 0)] - Complex64::new(0.0, 2.0)).norm() < 1e-15);

        let p = params23();
        let s = WaveState::random(&mut ChaCha8Rng::seed_from_u64(10), 2, 3, 1.5);
        let zdot = quartic_vector_field(&p, &s).unwrap();
        // d/dt Tr(ZZ⁺) = 2 Re Tr(Ż Z⁺)
        assert!((&zdot * s.z.adjoint()).trace().re.abs() < 1e-12);
        let fd = wirtinger_gradient_fd(
            |z: &CMatrixOf<Extended>| Observable::Quartic.eval_with(&p.a, &p.d, z),
            &s,
            FD_STEP,
        )
        .unwrap();
        assert!((fd.d_dzplus * Complex64::i() - zdot).iter().all(|c| c.norm() < 1e-6));
    }

    #[test]
    fn hierarchy_field_examples() {
        let p = params23().with_index(2, 0.0);
        let zero = WaveState::zeros(2, 3);
        assert!(hierarchy_vector_field(&p.with_index(4, 0.3), &zero).unwrap().iter().all(|c| c.is_zero()));
        let s = WaveState::random(&mut ChaCha8Rng::seed_from_u64(11), 2, 3, 1.0);
        let f = hierarchy_vector_field(&p, &s).unwrap();
        assert!((f - &s.z * Complex64::new(0.0, 2.0)).iter().all(|c| c.norm() < 1e-14));
    }

    #[test]
    fn invariant_set_rejects_duplicates() {
        let p = params23();
        assert!(InvariantSet::from_observables(&p, &[Observable::Alpha(1), Observable::Alpha(1)]).is_err());
        let set = InvariantSet::from_observables(&p, &standard_invariants(&p)).unwrap();
        assert_eq!(set.names(), ["H", "F", "alpha0", "alpha1", "alpha2", "delta1", "delta2", "s1", "s2", "s3"]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = params23();
        assert!(matches!(h_k_lambda(&p, &WaveState::zeros(2, 2)), Err(Error::Dimension(_))));
        assert!(matches!(quartic_vector_field(&p, &WaveState::zeros(3, 3)), Err(Error::Dimension(_))));
    }
}
