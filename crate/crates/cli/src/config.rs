//! JSON scenario configuration and its validation into an executable plan.

use std::path::PathBuf;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use nwave_core::flow::{uniform_grid, IntegratorOptions};
use nwave_core::hierarchy::Observable;
use nwave_core::linalg::{SystemParams, WaveState};
use nwave_core::reduction22::Leaf22;
use nwave_core::reduction23::{LeafParams, ReducedState};
use nwave_core::verify::{DEFAULT_LAMBDAS, DEFAULT_SCALES};

use crate::RunError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Verify,
    Integrate,
    Reduce23,
    Solve22,
    AngleAction,
}

impl ScenarioKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::Verify => "verify",
            ScenarioKind::Integrate => "integrate",
            ScenarioKind::Reduce23 => "reduce23",
            ScenarioKind::Solve22 => "solve22",
            ScenarioKind::AngleAction => "angle_action",
        }
    }
}

fn default_k() -> u32 {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub a: Vec<f64>,
    pub d: Vec<f64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_k")]
    pub k: u32,
    /// Accept repeated entries in `a` or `d`.
    #[serde(default)]
    pub allow_degenerate: bool,
}

/// Hamiltonian generating the full-space flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    #[default]
    Quartic,
    Quintic,
    /// `H_{k,λ}` with `k`, `λ` from `params`.
    Hierarchy,
}

/// Leaf coordinates. `angle_action` uses `s = [s1, s2, s3]`, `r1`, `r2`, `psi1`, `psi2`;
/// `solve22` uses `s = [s1, s2]`, `r1`, `psi1`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeafConfig {
    pub s: Vec<f64>,
    pub r: f64,
    pub r1: f64,
    #[serde(default)]
    pub r2: Option<f64>,
    pub psi1: f64,
    #[serde(default)]
    pub psi2: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Relative drift of conserved quantities.
    pub drift: f64,
    /// Residual of the reduced equations along a reduced full-space trajectory.
    pub reduced_residual: f64,
    /// Agreement of the two constructions of `G`.
    pub g_agreement: f64,
    /// Spread of `τ − t` and `γ`.
    pub angle: f64,
    /// Sup-norm gap between the closed-form and integrated `r₁`.
    pub shadow: f64,
    /// Bracket residuals in `verify`.
    pub bracket: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            drift: 1e-7,
            reduced_residual: 1e-5,
            g_agreement: 1e-8,
            angle: 1e-4,
            shadow: 1e-6,
            bracket: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub shapes: Vec<[usize; 2]>,
    pub k_max: u32,
    pub manley_rowe_k_max: u32,
    pub lambdas: Vec<f64>,
    pub samples: usize,
    pub scales: Vec<f64>,
    pub fd_step: f64,
    pub poisson_map: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            shapes: vec![[1, 1], [2, 2], [2, 3]],
            k_max: 3,
            manley_rowe_k_max: 2,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            samples: 5,
            scales: DEFAULT_SCALES.to_vec(),
            fd_step: nwave_core::linalg::FD_STEP,
            poisson_map: true,
        }
    }
}

/// A scenario as read from JSON. Complex entries are `[re, im]`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    #[serde(default)]
    pub params: Option<ParamsConfig>,
    /// Rows of `Z` (`n₊` rows of `n₋` entries).
    #[serde(default)]
    pub state: Option<Vec<Vec<[f64; 2]>>>,
    /// Scale of a seeded random state, used when `state` is absent.
    #[serde(default)]
    pub random_state_scale: Option<f64>,
    #[serde(default)]
    pub leaf: Option<LeafConfig>,
    #[serde(default)]
    pub flow: FlowKind,
    #[serde(default)]
    pub t_span: Option<[f64; 2]>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub verify: VerifyConfig,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Config(format!("invalid config: {e}")))
    }
}

/// Validated inputs of a scenario.
#[derive(Debug, Clone)]
pub enum Plan {
    Verify {
        cases: Vec<SystemParams>,
        settings: VerifyConfig,
    },
    Integrate {
        params: SystemParams,
        observable: Observable,
        state: WaveState,
        grid: Vec<f64>,
    },
    Reduce23 {
        params: SystemParams,
        state: WaveState,
        grid: Vec<f64>,
    },
    Solve22 {
        leaf: Leaf22,
        r1: f64,
        psi1: f64,
        grid: Vec<f64>,
    },
    AngleAction {
        params: SystemParams,
        state: ReducedState,
        grid: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct ValidatedScenario {
    pub kind: ScenarioKind,
    pub plan: Plan,
    pub tolerances: Tolerances,
    pub integrator: IntegratorOptions,
    pub seed: u64,
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> RunError {
    RunError::Config(format!("{field}: {msg}"))
}

fn require<'a, T>(value: &'a Option<T>, field: &str, kind: ScenarioKind) -> Result<&'a T, RunError> {
    value
        .as_ref()
        .ok_or_else(|| config_err(field, format!("required for scenario `{}`", kind.as_str())))
}

fn positive(value: f64, field: &str) -> Result<(), RunError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(config_err(field, format!("must be positive, got {value}")))
    }
}

fn build_params(cfg: &ParamsConfig) -> Result<SystemParams, RunError> {
    let built = if cfg.allow_degenerate {
        SystemParams::with_degenerate_spectra(cfg.a.clone(), cfg.d.clone(), cfg.lambda, cfg.k)
    } else {
        SystemParams::new(cfg.a.clone(), cfg.d.clone(), cfg.lambda, cfg.k)
    };
    built.map_err(|e| config_err("params", e))
}

fn build_state(cfg: &ScenarioConfig, params: &SystemParams, seed: u64) -> Result<WaveState, RunError> {
    let (rows, cols) = (params.n_plus(), params.n_minus());
    match &cfg.state {
        Some(entries) => {
            if entries.len() != rows || entries.iter().any(|row| row.len() != cols) {
                return Err(config_err(
                    "state",
                    format!("expected {rows} rows of {cols} entries to match params.a and params.d"),
                ));
            }
            if entries.iter().flatten().flatten().any(|x| !x.is_finite()) {
                return Err(config_err("state", "entries must be finite"));
            }
            let rows: Vec<Vec<Complex64>> = entries
                .iter()
                .map(|row| row.iter().map(|[re, im]| Complex64::new(*re, *im)).collect())
                .collect();
            WaveState::from_rows(&rows).map_err(|e| config_err("state", e))
        }
        None => {
            let scale = cfg.random_state_scale.unwrap_or(1.0);
            positive(scale, "random_state_scale")?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(WaveState::random(&mut rng, rows, cols, scale))
        }
    }
}

fn build_grid(cfg: &ScenarioConfig) -> Result<Vec<f64>, RunError> {
    let [t0, t1] = cfg.t_span.unwrap_or([0.0, 1.0]);
    if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
        return Err(config_err("t_span", format!("need finite t0 < t1, got [{t0}, {t1}]")));
    }
    let samples = cfg.samples.unwrap_or(100);
    if samples == 0 {
        return Err(config_err("samples", "must be at least 1"));
    }
    Ok(uniform_grid(t0, t1, samples))
}

fn check_shape(params: &SystemParams, n_plus: usize, n_minus: usize, kind: ScenarioKind) -> Result<(), RunError> {
    if params.n_plus() != n_plus || params.n_minus() != n_minus {
        return Err(config_err(
            "params",
            format!(
                "scenario `{}` needs {n_plus} entries in a and {n_minus} in d, got {} and {}",
                kind.as_str(),
                params.n_plus(),
                params.n_minus()
            ),
        ));
    }
    Ok(())
}

impl ScenarioConfig {
    /// Checks every field the scenario needs; no files are touched.
    pub fn validate(&self, seed_override: Option<u64>) -> Result<ValidatedScenario, RunError> {
        let seed = seed_override.unwrap_or(self.seed);
        let tol = &self.tolerances;
        for (name, v) in [
            ("tolerances.rel_tol", tol.rel_tol),
            ("tolerances.abs_tol", tol.abs_tol),
            ("tolerances.drift", tol.drift),
            ("tolerances.reduced_residual", tol.reduced_residual),
            ("tolerances.g_agreement", tol.g_agreement),
            ("tolerances.angle", tol.angle),
            ("tolerances.shadow", tol.shadow),
            ("tolerances.bracket", tol.bracket),
        ] {
            positive(v, name)?;
        }
        let kind = self.kind;
        let plan = match kind {
            ScenarioKind::Verify => {
                let v = &self.verify;
                if v.k_max < 1 {
                    return Err(config_err("verify.k_max", "must be at least 1"));
                }
                if v.samples < 1 {
                    return Err(config_err("verify.samples", "must be at least 1"));
                }
                if v.scales.is_empty() {
                    return Err(config_err("verify.scales", "must not be empty"));
                }
                for s in &v.scales {
                    positive(*s, "verify.scales")?;
                }
                positive(v.fd_step, "verify.fd_step")?;
                let cases = match &self.params {
                    Some(p) => vec![build_params(p)?],
                    None => {
                        if v.shapes.iter().any(|[p, m]| *p == 0 || *m == 0) {
                            return Err(config_err("verify.shapes", "dimensions must be positive"));
                        }
                        let shapes: Vec<(usize, usize)> = v.shapes.iter().map(|[p, m]| (*p, *m)).collect();
                        nwave_core::verify::default_cases(&shapes).map_err(|e| config_err("verify.shapes", e))?
                    }
                };
                Plan::Verify {
                    cases,
                    settings: v.clone(),
                }
            }
            ScenarioKind::Integrate => {
                let params = build_params(require(&self.params, "params", kind)?)?;
                let observable = match self.flow {
                    FlowKind::Quartic => Observable::Quartic,
                    FlowKind::Quintic => Observable::Quintic,
                    FlowKind::Hierarchy => Observable::Hierarchy {
                        k: params.k,
                        lambda: params.lambda,
                    },
                };
                let state = build_state(self, &params, seed)?;
                Plan::Integrate {
                    observable,
                    state,
                    grid: build_grid(self)?,
                    params,
                }
            }
            ScenarioKind::Reduce23 => {
                let params = build_params(require(&self.params, "params", kind)?)?;
                check_shape(&params, 2, 3, kind)?;
                let state = build_state(self, &params, seed)?;
                Plan::Reduce23 {
                    state,
                    grid: build_grid(self)?,
                    params,
                }
            }
            ScenarioKind::Solve22 => {
                let pc = require(&self.params, "params", kind)?;
                let params = build_params(pc)?;
                let leaf = require(&self.leaf, "leaf", kind)?;
                if leaf.s.len() != 2 {
                    return Err(config_err("leaf.s", "solve22 needs two radii [s1, s2]"));
                }
                let leaf22 = Leaf22::from_params(&params, leaf.s[0], leaf.s[1], leaf.r).map_err(|e| config_err("leaf", e))?;
                let (lo, hi) = leaf22.r1_range();
                if !(leaf.r1 >= lo && leaf.r1 <= hi) {
                    return Err(config_err("leaf.r1", format!("must lie in [{lo}, {hi}]")));
                }
                Plan::Solve22 {
                    leaf: leaf22,
                    r1: leaf.r1,
                    psi1: leaf.psi1,
                    grid: build_grid(self)?,
                }
            }
            ScenarioKind::AngleAction => {
                let params = build_params(require(&self.params, "params", kind)?)?;
                check_shape(&params, 2, 3, kind)?;
                let leaf = require(&self.leaf, "leaf", kind)?;
                if leaf.s.len() != 3 {
                    return Err(config_err("leaf.s", "angle_action needs three radii [s1, s2, s3]"));
                }
                let r2 = leaf.r2.ok_or_else(|| config_err("leaf.r2", "required for angle_action"))?;
                let psi2 = leaf.psi2.ok_or_else(|| config_err("leaf.psi2", "required for angle_action"))?;
                let lp = LeafParams::new([leaf.s[0], leaf.s[1], leaf.s[2]], leaf.r).map_err(|e| config_err("leaf", e))?;
                let state = ReducedState::new(lp, leaf.r1, r2, leaf.psi1, psi2).map_err(|e| config_err("leaf", e))?;
                Plan::AngleAction {
                    params,
                    state,
                    grid: build_grid(self)?,
                }
            }
        };
        Ok(ValidatedScenario {
            kind,
            plan,
            tolerances: self.tolerances.clone(),
            integrator: IntegratorOptions::new(tol.rel_tol, tol.abs_tol),
            seed,
        })
    }
}
