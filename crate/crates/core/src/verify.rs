//! Batch verification of the commutation relations: involution of the
//! hierarchy, the Manley–Rowe integrals, and the momentum-map property of
//! `J: ℂ⁶ → u(2)* ⊕ u(2)* ⊕ u(2)*`. Every residual comes from the
//! finite-difference bracket, evaluated in double-double precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hierarchy::Observable;
use crate::linalg::{poisson_bracket_table_fd, CMatrixOf, Extended, SystemParams, WaveState, FD_STEP};

/// Size parameters applied to the unit-disc samples.
pub const DEFAULT_SCALES: [f64; 3] = [0.1, 1.0, 3.0];
pub const DEFAULT_LAMBDAS: [f64; 3] = [0.0, 0.7, -1.3];
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

/// One row of a residual table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub case_id: String,
    pub relation: String,
    pub samples: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Set when the parameters violate the distinctness assumptions on `a` and `d`.
    pub param_violation: Option<String>,
}

impl ResidualReport {
    fn new(case_id: String, relation: String, samples: usize, max_residual: f64, tolerance: f64) -> Self {
        Self {
            case_id,
            relation,
            samples,
            max_residual,
            tolerance,
            pass: max_residual <= tolerance,
            param_violation: None,
        }
    }
}

/// Sampling controls shared by the checks.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub scales: Vec<f64>,
    pub fd_step: f64,
    pub tolerance: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            scales: DEFAULT_SCALES.to_vec(),
            fd_step: FD_STEP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// Parameters with distinct `a` and `d` entries for a given shape.
pub fn default_params(n_plus: usize, n_minus: usize) -> Result<SystemParams> {
    let a = (0..n_plus).map(|i| 0.3 - 0.55 * i as f64).collect();
    let d = (0..n_minus).map(|j| 0.5 + 0.6 * j as f64 - 1.9 * (j == 2) as u8 as f64).collect();
    SystemParams::new(a, d, 0.0, 1)
}

pub fn default_cases(shapes: &[(usize, usize)]) -> Result<Vec<SystemParams>> {
    shapes.iter().map(|&(p, m)| default_params(p, m)).collect()
}

/// Deterministic stream of sample states for one (shape, scale) cell.
fn sample_states(seed: u64, cell: u64, rows: usize, cols: usize, scale: f64, samples: usize) -> Vec<WaveState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell);
    (0..samples).map(|_| WaveState::random(&mut rng, rows, cols, scale)).collect()
}

fn shape_tag(params: &SystemParams) -> String {
    format!("{}x{}", params.n_plus(), params.n_minus())
}

fn cell_id(case: usize, scale_idx: usize) -> u64 {
    ((case as u64) << 16) | scale_idx as u64
}

type ExtFn = Box<dyn Fn(&CMatrixOf<Extended>) -> Extended + Send + Sync>;

fn observable_fn(params: &SystemParams, obs: Observable) -> ExtFn {
    let (a, d) = (params.a.clone(), params.d.clone());
    Box::new(move |z: &CMatrixOf<Extended>| obs.eval_with::<Extended>(&a, &d, z))
}

/// Maximum bracket residual over `samples` states for every pair `(i, j)` with
/// `pairs(i, j)` true, per scale. `Err` entries propagate as infinite residuals.
fn bracket_grid(
    params: &SystemParams,
    observables: &[Observable],
    case: usize,
    samples: usize,
    seed: u64,
    opts: &VerifyOptions,
) -> Vec<(usize, Vec<Vec<f64>>)> {
    let (rows, cols) = (params.n_plus(), params.n_minus());
    opts.scales
        .par_iter()
        .enumerate()
        .map(|(si, &scale)| {
            let fns: Vec<ExtFn> = observables.iter().map(|o| observable_fn(params, *o)).collect();
            let n = observables.len();
            let mut worst = vec![vec![0.0f64; n]; n];
            for state in sample_states(seed, cell_id(case, si), rows, cols, scale, samples) {
                match poisson_bracket_table_fd(&fns, &state, opts.fd_step) {
                    Ok(table) => {
                        for i in 0..n {
                            for j in 0..n {
                                worst[i][j] = worst[i][j].max(table[i][j].abs());
                            }
                        }
                    }
                    Err(_) => worst.iter_mut().flatten().for_each(|w| *w = f64::INFINITY),
                }
            }
            (si, worst)
        })
        .collect()
}

fn state_shape_check(params: &SystemParams) -> Option<String> {
    if params.n_plus() == 0 || params.n_minus() == 0 {
        Some("empty shape".into())
    } else {
        None
    }
}

fn sorted(mut reports: Vec<ResidualReport>) -> Vec<ResidualReport> {
    reports.sort_by(|a, b| a.case_id.cmp(&b.case_id).then_with(|| a.relation.cmp(&b.relation)));
    reports
}

/// `|{H_{k,λ}, H_{n,λ′}}|` for all `k ≤ n ≤ k_max` and `λ, λ′` in `lambdas`.
pub fn check_involution(
    cases: &[SystemParams],
    k_max: u32,
    lambdas: &[f64],
    samples: usize,
    seed: u64,
    opts: &VerifyOptions,
) -> Result<Vec<ResidualReport>> {
    if k_max < 1 || samples < 1 {
        return Err(Error::Validation(format!("need k_max >= 1 and samples >= 1, got {k_max} and {samples}")));
    }
    let mut out = Vec::new();
    for (case, params) in cases.iter().enumerate() {
        if let Some(msg) = state_shape_check(params) {
            return Err(Error::Dimension(msg));
        }
        let observables: Vec<Observable> = (1..=k_max)
            .flat_map(|k| lambdas.iter().map(move |&lambda| Observable::Hierarchy { k, lambda }))
            .collect();
        let violation = params.spectrum_violation();
        for (si, worst) in bracket_grid(params, &observables, case, samples, seed, opts) {
            for i in 0..observables.len() {
                for j in i..observables.len() {
                    let case_id = format!("involution/{}/scale={}", shape_tag(params), opts.scales[si]);
                    let relation = format!("{{{}, {}}}", observables[i], observables[j]);
                    let mut r = ResidualReport::new(case_id, relation, samples, worst[i][j], opts.tolerance);
                    r.param_violation = violation.clone();
                    out.push(r);
                }
            }
        }
    }
    Ok(sorted(out))
}

/// Brackets among `α_0..α_{k_max}`, `δ_1..δ_{k_max}` and against `H_{m,λ}`
/// for `m ≤ h_max`, `λ ∈ lambdas`.
pub fn check_manley_rowe(
    cases: &[SystemParams],
    k_max: u32,
    h_max: u32,
    lambdas: &[f64],
    samples: usize,
    seed: u64,
    opts: &VerifyOptions,
) -> Result<Vec<ResidualReport>> {
    if samples < 1 {
        return Err(Error::Validation("samples must be at least 1".into()));
    }
    let mut out = Vec::new();
    for (case, params) in cases.iter().enumerate() {
        if let Some(msg) = state_shape_check(params) {
            return Err(Error::Dimension(msg));
        }
        let mut observables: Vec<Observable> = (0..=k_max).map(Observable::Alpha).collect();
        observables.extend((1..=k_max).map(Observable::Delta));
        let n_mr = observables.len();
        observables.extend((1..=h_max).flat_map(|k| lambdas.iter().map(move |&lambda| Observable::Hierarchy { k, lambda })));
        let violation = params.spectrum_violation();
        // Offset the stream so these samples differ from the involution suite.
        for (si, worst) in bracket_grid(params, &observables, case + 1000, samples, seed, opts) {
            for i in 0..n_mr {
                for j in i..observables.len() {
                    let case_id = format!("manley_rowe/{}/scale={}", shape_tag(params), opts.scales[si]);
                    let relation = format!("{{{}, {}}}", observables[i], observables[j]);
                    let mut r = ResidualReport::new(case_id, relation, samples, worst[i][j], opts.tolerance);
                    r.param_violation = violation.clone();
                    out.push(r);
                }
            }
        }
    }
    Ok(sorted(out))
}

/// Coordinate `(sphere, kind)` with kind 0..4 = `s, r, Re η, Im η`.
const COORD_NAMES: [&str; 4] = ["s", "r", "Re eta", "Im eta"];

fn coordinate(k: usize, kind: usize) -> ExtFn {
    Box::new(move |z: &CMatrixOf<Extended>| {
        let (zk, vk) = (z[(0, k)], z[(1, k)]);
        match kind {
            0 => zk.norm_sqr() + vk.norm_sqr(),
            1 => zk.norm_sqr() - vk.norm_sqr(),
            _ => {
                let eta = zk.conj() * vk;
                if kind == 2 {
                    eta.re
                } else {
                    eta.im
                }
            }
        }
    })
}

/// Lie–Poisson bracket of two coordinates at a point with sphere values `(s, r, x, y)`.
fn lie_poisson(i: (usize, usize), j: (usize, usize), r: f64, x: f64, y: f64) -> f64 {
    if i.0 != j.0 {
        return 0.0;
    }
    match (i.1, j.1) {
        (0, _) | (_, 0) => 0.0,
        (2, 3) => -0.5 * r,
        (3, 2) => 0.5 * r,
        (1, 2) => -2.0 * y,
        (2, 1) => 2.0 * y,
        (1, 3) => 2.0 * x,
        (3, 1) => -2.0 * x,
        _ => 0.0,
    }
}

/// Per-relation residuals of `{f∘J, g∘J} = {f, g}_LP ∘ J` on `ℂ⁶` (as `2 × 3`
/// states with rows `z`, `v`), plus centrality of `c_k = r_k²/2 + 2|η_k|²`.
pub fn poisson_map_reports(samples: usize, seed: u64, opts: &VerifyOptions) -> Result<Vec<ResidualReport>> {
    if samples < 1 {
        return Err(Error::Validation("samples must be at least 1".into()));
    }
    let labels: Vec<(usize, usize)> = (0..3).flat_map(|k| (0..4).map(move |kind| (k, kind))).collect();
    let mut fns: Vec<ExtFn> = labels.iter().map(|&(k, kind)| coordinate(k, kind)).collect();
    for k in 0..3 {
        fns.push(Box::new(move |z: &CMatrixOf<Extended>| {
            let r = z[(0, k)].norm_sqr() - z[(1, k)].norm_sqr();
            let eta = z[(0, k)].conj() * z[(1, k)];
            r * r * Extended::from(0.5) + eta.norm_sqr() * Extended::from(2.0)
        }));
    }
    let n = labels.len();
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let per_scale: Vec<Result<Vec<(String, f64)>>> = opts
        .scales
        .par_iter()
        .enumerate()
        .map(|(si, &scale)| {
            let mut rows = Vec::new();
            for state in sample_states(seed, cell_id(2000, si), 2, 3, scale, samples) {
                let table = poisson_bracket_table_fd(&fns, &state, opts.fd_step)?;
                let lc = crate::reduction23::leaf_of_state(&state)?;
                for a in 0..n {
                    for b in 0..n {
                        let (k, _) = labels[a];
                        let expected =
                            lie_poisson(labels[a], labels[b], lc.r[k], lc.eta[k].re, lc.eta[k].im);
                        let name = format!(
                            "poisson_map/scale={}|{{{}_{}, {}_{}}}",
                            scale,
                            COORD_NAMES[labels[a].1],
                            labels[a].0 + 1,
                            COORD_NAMES[labels[b].1],
                            labels[b].0 + 1
                        );
                        rows.push((name, (table[a][b] - expected).abs()));
                    }
                    for c in 0..3 {
                        let name = format!(
                            "poisson_map/scale={}|{{c_{}, {}_{}}}",
                            scale,
                            c + 1,
                            COORD_NAMES[labels[a].1],
                            labels[a].0 + 1
                        );
                        rows.push((name, table[n + c][a].abs()));
                    }
                }
            }
            Ok(rows)
        })
        .collect();
    for rows in per_scale {
        for (name, res) in rows? {
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(res);
        }
    }
    let reports = worst
        .into_iter()
        .map(|(key, res)| {
            let (case_id, relation) = key.split_once('|').expect("key has a separator");
            ResidualReport::new(case_id.to_string(), relation.to_string(), samples, res, opts.tolerance)
        })
        .collect();
    Ok(sorted(reports))
}

/// Maximum residual over all pulled-back bracket relations.
pub fn check_poisson_map(samples: usize, seed: u64, opts: &VerifyOptions) -> Result<ResidualReport> {
    let all = poisson_map_reports(samples, seed, opts)?;
    let max = all.iter().map(|r| r.max_residual).fold(0.0, f64::max);
    Ok(ResidualReport::new(
        "poisson_map".into(),
        "{f o J, g o J} = {f, g}_LP o J".into(),
        samples,
        max,
        opts.tolerance,
    ))
}

pub fn all_pass(reports: &[ResidualReport]) -> bool {
    reports.iter().all(|r| r.pass)
}

/// CSV with header `case_id,relation,samples,max_residual,tolerance,pass,param_violation`.
pub fn write_csv<W: Write>(reports: &[ResidualReport], mut w: W) -> std::io::Result<()> {
    writeln!(w, "case_id,relation,samples,max_residual,tolerance,pass,param_violation")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{:?},{:?},{},{}",
            csv_field(&r.case_id),
            csv_field(&r.relation),
            r.samples,
            r.max_residual,
            r.tolerance,
            r.pass,
            csv_field(r.param_violation.as_deref().unwrap_or(""))
        )?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Aligned plain-text table, failures marked.
pub fn to_text(reports: &[ResidualReport]) -> String {
    let width = reports.iter().map(|r| r.case_id.len() + r.relation.len() + 2).max().unwrap_or(0);
    let mut out = String::new();
    for r in reports {
        let label = format!("{}  {}", r.case_id, r.relation);
        let _ = write!(
            out,
            "{label:<width$}  {:>10.3e} / {:.0e}  {}",
            r.max_residual,
            r.tolerance,
            if r.pass { "ok" } else { "FAIL" }
        );
        if let Some(v) = &r.param_violation {
            let _ = write!(out, "  [{v}]");
        }
        out.push('\n');
    }
    out
}
