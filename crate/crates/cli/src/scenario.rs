//! Execution of validated scenarios.

use serde::Serialize;
use serde_json::{json, Value};

use nwave_core::flow::{integrate, integrate_observable_flow, Trajectory};
use nwave_core::hierarchy::{standard_invariants, InvariantSet, Observable};
use nwave_core::linalg::WaveState;
use nwave_core::reduction22::{field22, solve_22};
use nwave_core::reduction23::{
    angle_action, g_from_full, leaf_of_state, pushforward_velocity, reduce_trajectory, reduced_field,
    reduced_invariants, reduced_vector_field, REDUCED_TIME_SCALE,
};
use nwave_core::verify::{self, VerifyOptions};
use nwave_core::Error;

use crate::config::{Plan, ValidatedScenario};
use crate::RunError;

/// One tolerance-checked quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

/// Files of one run, kept in memory until the single final write.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub files: Vec<(String, String)>,
    pub checks: Vec<Check>,
    /// Scenario-specific content of `report.json`.
    pub details: Value,
    pub error: Option<String>,
}

impl Artifacts {
    pub(crate) fn with_report(mut self, scenario: &ValidatedScenario, exit_code: i32) -> Result<Self, RunError> {
        let status = match exit_code {
            0 => "pass",
            1 => "tolerance_fail",
            _ => "numerical_error",
        };
        let report = json!({
            "kind": scenario.kind.as_str(),
            "status": status,
            "exit_code": exit_code,
            "seed": scenario.seed,
            "error": self.error,
            "checks": self.checks,
            "details": self.details,
        });
        let text = serde_json::to_string_pretty(&report).map_err(|e| RunError::Config(e.to_string()))?;
        self.files.push(("report.json".into(), text + "\n"));
        Ok(self)
    }
}

pub(crate) fn failure_artifacts(_scenario: &ValidatedScenario, err: &RunError) -> Artifacts {
    Artifacts {
        error: Some(err.to_string()),
        details: Value::Null,
        ..Artifacts::default()
    }
}

fn drift_csv(rows: &[(String, f64, f64, f64)], tolerance: f64) -> String {
    let mut out = String::from("name,initial,max_abs_drift,max_rel_drift,tolerance,pass\n");
    for (name, initial, abs, rel) in rows {
        out.push_str(&format!("{name},{initial:?},{abs:?},{rel:?},{tolerance:?},{}\n", rel <= &tolerance));
    }
    out
}

fn drift_rows(traj: &Trajectory) -> Vec<(String, f64, f64, f64)> {
    traj.invariant_names
        .iter()
        .zip(&traj.invariants)
        .zip(&traj.drift)
        .map(|((name, series), rel)| {
            let initial = series[0];
            let abs = series.iter().fold(0.0f64, |m, v| m.max((v - initial).abs()));
            (name.clone(), initial, abs, *rel)
        })
        .collect()
}

/// Runs the plan and collects artifacts and checks.
pub fn execute(scenario: &ValidatedScenario) -> Result<Artifacts, RunError> {
    let tol = &scenario.tolerances;
    let opts = &scenario.integrator;
    match &scenario.plan {
        Plan::Verify { cases, settings } => {
            let vopts = VerifyOptions {
                scales: settings.scales.clone(),
                fd_step: settings.fd_step,
                tolerance: tol.bracket,
            };
            let mut reports = verify::check_involution(
                cases,
                settings.k_max,
                &settings.lambdas,
                settings.samples,
                scenario.seed,
                &vopts,
            )?;
            reports.extend(verify::check_manley_rowe(
                cases,
                settings.manley_rowe_k_max,
                settings.k_max,
                &settings.lambdas,
                settings.samples,
                scenario.seed,
                &vopts,
            )?);
            if settings.poisson_map {
                reports.extend(verify::poisson_map_reports(settings.samples, scenario.seed, &vopts)?);
            }
            let mut csv = Vec::new();
            verify::write_csv(&reports, &mut csv)?;
            let worst = reports.iter().map(|r| r.max_residual).fold(0.0, f64::max);
            let failures: Vec<&verify::ResidualReport> = reports.iter().filter(|r| !r.pass).collect();
            Ok(Artifacts {
                files: vec![
                    ("residuals.csv".into(), String::from_utf8(csv).expect("CSV is UTF-8")),
                    ("residuals.txt".into(), verify::to_text(&reports)),
                ],
                checks: vec![Check::new("max_bracket_residual", worst, tol.bracket)],
                details: json!({
                    "relations": reports.len(),
                    "failures": failures,
                    "param_violations": reports.iter().filter(|r| r.param_violation.is_some()).count(),
                }),
                error: None,
            })
        }
        Plan::Integrate {
            params,
            observable,
            state,
            grid,
        } => {
            let set = InvariantSet::from_observables(params, &standard_invariants(params))?;
            let shifted: Vec<f64> = grid.iter().map(|t| t - grid[0]).collect();
            let mut traj = integrate_observable_flow(
                params,
                *observable,
                state,
                shifted[shifted.len() - 1],
                shifted.len() - 1,
                opts,
                &set,
            )?;
            traj.times = grid.clone();
            let rows = drift_rows(&traj);
            let checks = rows
                .iter()
                .map(|(name, _, _, rel)| Check::new(format!("drift_{name}"), *rel, tol.drift))
                .collect();
            Ok(Artifacts {
                files: vec![
                    ("trajectory.csv".into(), traj.to_csv_string()),
                    ("invariants.csv".into(), drift_csv(&rows, tol.drift)),
                ],
                checks,
                details: json!({
                    "flow": observable.to_string(),
                    "steps": traj.stats.accepted,
                    "rejected_steps": traj.stats.rejected,
                    "drift": rows.iter().map(|(n, i, a, r)| json!({"name": n, "initial": i, "max_abs_drift": a, "max_rel_drift": r})).collect::<Vec<_>>(),
                }),
                error: None,
            })
        }
        Plan::Reduce23 { params, state, grid } => {
            let (rows, cols) = state.shape();
            let full = integrate(
                nwave_core::flow::observable_field(params.clone(), Observable::Quartic),
                &state.to_flat(),
                (grid[0], grid[grid.len() - 1]),
                opts,
                grid,
                WaveState::coordinate_names(rows, cols),
            )?;
            let states = full
                .states
                .iter()
                .map(|y| WaveState::from_flat(rows, cols, y))
                .collect::<nwave_core::Result<Vec<_>>>()?;
            let reduced = reduce_trajectory(&states)?;
            let mut ode_residual = 0.0f64;
            let mut g_gap = 0.0f64;
            let mut series: Vec<Vec<f64>> = vec![Vec::new(); 3];
            for (st, red) in states.iter().zip(&reduced) {
                let zdot = WaveState {
                    z: Observable::Quartic.vector_field(params, st)?,
                };
                let push = pushforward_velocity(st, &zdot)?;
                let field = reduced_vector_field(red, params)?;
                for i in 0..4 {
                    ode_residual = ode_residual.max((push[i] - REDUCED_TIME_SCALE * field[i]).abs());
                }
                let polar = leaf_of_state(st)?.to_polar();
                let (h, g, r) = reduced_invariants(&polar, params)?;
                g_gap = g_gap.max((g - g_from_full(params, st)?).abs());
                for (s, v) in series.iter_mut().zip([h, g, r]) {
                    s.push(v);
                }
            }
            let mut traj = Trajectory::from_samples(
                grid.clone(),
                ["r1", "r2", "psi1", "psi2"].iter().map(|s| s.to_string()).collect(),
                reduced.iter().map(|r| r.to_array().to_vec()).collect(),
            )?;
            traj.invariant_names = ["H", "G", "R"].iter().map(|s| s.to_string()).collect();
            traj.drift = series
                .iter()
                .map(|s| {
                    let abs = s.iter().fold(0.0f64, |m, v| m.max((v - s[0]).abs()));
                    if s[0] != 0.0 {
                        abs / s[0].abs()
                    } else {
                        abs
                    }
                })
                .collect();
            traj.invariants = series;
            let rows = drift_rows(&traj);
            let mut checks = vec![
                Check::new("reduced_ode_residual", ode_residual, tol.reduced_residual),
                Check::new("g_construction_gap", g_gap, tol.g_agreement),
            ];
            checks.extend(rows.iter().map(|(n, _, _, rel)| Check::new(format!("drift_{n}"), *rel, tol.drift)));
            Ok(Artifacts {
                files: vec![
                    ("trajectory.csv".into(), traj.to_csv_string()),
                    ("invariants.csv".into(), drift_csv(&rows, tol.drift)),
                ],
                checks,
                details: json!({
                    "leaf_radii": reduced[0].leaf.s,
                    "level_r": reduced[0].leaf.r,
                    "reduced_time_scale": REDUCED_TIME_SCALE,
                }),
                error: None,
            })
        }
        Plan::Solve22 { leaf, r1, psi1, grid } => {
            let shifted: Vec<f64> = grid.iter().map(|t| t - grid[0]).collect();
            let mut sol = solve_22(leaf, *r1, *psi1, &shifted)?;
            let shadow = integrate(
                field22(*leaf),
                &[*r1, *psi1],
                (0.0, shifted[shifted.len() - 1]),
                opts,
                &shifted,
                vec!["r1".into(), "psi1".into()],
            )?;
            let mut sup_r1 = 0.0f64;
            let mut sup_psi1 = 0.0f64;
            for (a, b) in sol.trajectory.states.iter().zip(&shadow.states) {
                sup_r1 = sup_r1.max((a[0] - b[0]).abs());
                sup_psi1 = sup_psi1.max((a[1] - b[1]).abs());
            }
            sol.trajectory.times = grid.clone();
            let rows = drift_rows(&sol.trajectory);
            let mut checks = vec![Check::new("shadow_sup_r1", sup_r1, tol.shadow)];
            checks.extend(rows.iter().map(|(n, _, _, rel)| Check::new(format!("drift_{n}"), *rel, tol.drift)));
            Ok(Artifacts {
                files: vec![
                    ("trajectory.csv".into(), sol.trajectory.to_csv_string()),
                    ("invariants.csv".into(), drift_csv(&rows, tol.drift)),
                ],
                checks,
                details: json!({
                    "energy": sol.h,
                    "period": sol.period,
                    "interval": sol.interval.map(|(a, b)| [a, b]),
                    "equilibrium": sol.equilibrium,
                    "quartic_coefficients": sol.quartic.coeffs,
                    "quartic_roots": sol.quartic.roots,
                    "shadow_sup_r1": sup_r1,
                    "shadow_sup_psi1": sup_psi1,
                }),
                error: None,
            })
        }
        Plan::AngleAction { params, state, grid } => {
            let traj = integrate(
                reduced_field(state.leaf, params.clone()),
                &state.to_array(),
                (grid[0], grid[grid.len() - 1]),
                opts,
                grid,
                ["r1", "r2", "psi1", "psi2"].iter().map(|s| s.to_string()).collect(),
            )?;
            let mut rows = Vec::new();
            let mut events = Vec::new();
            for (t, y) in traj.times.iter().zip(&traj.states) {
                match angle_action(&state.with_coords(y), params) {
                    Ok(p) => rows.push((*t, p)),
                    Err(e @ (Error::BranchPoint { .. } | Error::NoConvergence { .. })) => {
                        events.push(json!({"t": t, "event": e.to_string()}))
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            let spread = |f: &dyn Fn(&(f64, nwave_core::reduction23::AngleActionPoint)) -> f64| {
                let vals: Vec<f64> = rows.iter().map(f).collect();
                let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                if vals.is_empty() {
                    f64::INFINITY
                } else {
                    max - min
                }
            };
            let tau_spread = spread(&|(t, p)| p.tau - t);
            let gamma_spread = spread(&|(_, p)| p.gamma);
            let g_spread = spread(&|(_, p)| p.g);
            let h_spread = spread(&|(_, p)| p.h);
            let checks = vec![
                Check::new("tau_minus_t_spread", tau_spread, tol.angle),
                Check::new("gamma_spread", gamma_spread, tol.angle),
                Check::new("branch_events", events.len() as f64, 0.0),
            ];
            let mut angle_csv = String::from("t,gamma,tau,tau_minus_t,G,H\n");
            for (t, p) in &rows {
                angle_csv.push_str(&format!("{t:?},{:?},{:?},{:?},{:?},{:?}\n", p.gamma, p.tau, p.tau - t, p.g, p.h));
            }
            let rel = |initial: f64, spread: f64| if initial != 0.0 { spread / initial.abs() } else { spread };
            let (g0, h0) = rows.first().map_or((f64::NAN, f64::NAN), |r| (r.1.g, r.1.h));
            let inv_rows = vec![
                ("G".to_string(), g0, g_spread, rel(g0, g_spread)),
                ("H".to_string(), h0, h_spread, rel(h0, h_spread)),
            ];
            Ok(Artifacts {
                files: vec![
                    ("trajectory.csv".into(), traj.to_csv_string()),
                    ("angle_action.csv".into(), angle_csv),
                    ("invariants.csv".into(), drift_csv(&inv_rows, tol.drift)),
                ],
                checks,
                details: json!({
                    "valid_samples": rows.len(),
                    "branch_events": events,
                    "tau_minus_t_spread": tau_spread,
                    "gamma_spread": gamma_spread,
                }),
                error: None,
            })
        }
    }
}
