//! Adaptive Dormand–Prince 5(4) integration with continuous output, and
//! trajectories that carry invariant time series and drift statistics.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::hierarchy::{InvariantSet, Observable};
use crate::linalg::{SystemParams, WaveState};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;

/// Integration controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Upper bound on accepted plus rejected steps.
    pub max_steps: usize,
    /// Optional cap on |h|.
    pub max_step: Option<f64>,
}

impl IntegratorOptions {
    pub fn new(rel_tol: f64, abs_tol: f64) -> Self {
        Self {
            rel_tol,
            abs_tol,
            max_steps: 2_000_000,
            max_step: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) || !self.rel_tol.is_finite() || !self.abs_tol.is_finite() {
            return Err(Error::Validation(format!(
                "tolerances must be positive and finite (rel {}, abs {})",
                self.rel_tol, self.abs_tol
            )));
        }
        if let Some(h) = self.max_step {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Validation(format!("max_step must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self::new(1e-10, 1e-12)
    }
}

#[derive(Debug, Clone)]
struct Segment {
    t0: f64,
    h: f64,
    rcont: [Vec<f64>; 5],
}

impl Segment {
    fn eval_into(&self, t: f64, out: &mut [f64]) {
        let theta = (t - self.t0) / self.h;
        let theta1 = 1.0 - theta;
        let [r1, r2, r3, r4, r5] = &self.rcont;
        for i in 0..out.len() {
            out[i] = r1[i] + theta * (r2[i] + theta1 * (r3[i] + theta * (r4[i] + theta1 * r5[i])));
        }
    }
}

/// Step statistics of one integration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Piecewise quartic continuous extension of an integration.
#[derive(Debug, Clone)]
pub struct DenseSolution {
    t_start: f64,
    t_end: f64,
    y_start: Vec<f64>,
    y_end: Vec<f64>,
    segments: Vec<Segment>,
    pub stats: StepStats,
}

impl DenseSolution {
    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn dim(&self) -> usize {
        self.y_start.len()
    }

    pub fn y_end(&self) -> &[f64] {
        &self.y_end
    }

    /// State at `t`; `t` must lie in the integrated interval.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let dir = (self.t_end - self.t_start).signum();
        let slack = 1e-12 * self.t_start.abs().max(self.t_end.abs()).max(1.0);
        if dir * (t - self.t_start) < -slack || dir * (t - self.t_end) > slack {
            return Err(Error::Validation(format!(
                "t = {t} outside integrated interval [{}, {}]",
                self.t_start, self.t_end
            )));
        }
        if t == self.t_start {
            return Ok(self.y_start.clone());
        }
        if t == self.t_end {
            return Ok(self.y_end.clone());
        }
        let idx = self
            .segments
            .partition_point(|s| dir * (s.t0 + s.h - t) < 0.0)
            .min(self.segments.len() - 1);
        let mut out = vec![0.0; self.dim()];
        self.segments[idx].eval_into(t, &mut out);
        Ok(out)
    }

    /// Times at the ends of accepted steps.
    pub fn step_times(&self) -> Vec<f64> {
        std::iter::once(self.t_start)
            .chain(self.segments.iter().map(|s| s.t0 + s.h))
            .collect()
    }
}

fn error_norm(err: &[f64], y0: &[f64], y1: &[f64], opts: &IntegratorOptions) -> f64 {
    let n = err.len().max(1) as f64;
    let sum: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = opts.abs_tol + opts.rel_tol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn check_finite(t: f64, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteDerivative { t })
    }
}

/// Right-hand side signature: writes `dy/dt` at `(t, y)` into the last argument.
pub trait VectorField: FnMut(f64, &[f64], &mut [f64]) -> Result<()> {}
impl<F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>> VectorField for F {}

/// Integrates `ẏ = field(t, y)` from `t0` to `t1` (either direction) and keeps
/// the continuous extension.
pub fn integrate_dense<F: VectorField>(
    mut field: F,
    y0: &[f64],
    t_span: (f64, f64),
    opts: &IntegratorOptions,
) -> Result<DenseSolution> {
    opts.validate()?;
    let (t0, t1) = t_span;
    if !(t0.is_finite() && t1.is_finite()) || t0 == t1 {
        return Err(Error::Validation(format!("invalid time span ({t0}, {t1})")));
    }
    if y0.is_empty() || !y0.iter().all(|x| x.is_finite()) {
        return Err(Error::Validation("initial state must be nonempty and finite".into()));
    }
    let n = y0.len();
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let hmax = opts.max_step.unwrap_or(span).min(span);

    let mut stats = StepStats::default();
    let mut eval = |t: f64, y: &[f64], out: &mut [f64], stats: &mut StepStats| -> Result<()> {
        stats.evaluations += 1;
        field(t, y, out)?;
        check_finite(t, out)
    };

    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    eval(t0, &y, &mut k1, &mut stats)?;

    let mut h = initial_step(&mut eval, t0, &y, &k1, dir, hmax, opts, &mut stats)?;
    let mut t = t0;
    let mut segments = Vec::new();
    let mut fac_old: f64 = 1e-4;
    let mut reject_prev = false;

    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut err = vec![0.0; n];

    loop {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(Error::Numerical(format!(
                "step budget of {} exhausted at t = {t}",
                opts.max_steps
            )));
        }
        let last = dir * (t + h - t1) >= 0.0;
        if last {
            h = t1 - t;
        }
        if h.abs() <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(Error::StepUnderflow { t, h: h.abs() });
        }

        for i in 0..n {
            ytmp[i] = y[i] + h * A21 * k1[i];
        }
        eval(t + C2 * h, &ytmp, &mut k2, &mut stats)?;
        for i in 0..n {
            ytmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        eval(t + C3 * h, &ytmp, &mut k3, &mut stats)?;
        for i in 0..n {
            ytmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        eval(t + C4 * h, &ytmp, &mut k4, &mut stats)?;
        for i in 0..n {
            ytmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        eval(t + C5 * h, &ytmp, &mut k5, &mut stats)?;
        for i in 0..n {
            ytmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        let t_new = if last { t1 } else { t + h };
        eval(t_new, &ytmp, &mut k6, &mut stats)?;
        for i in 0..n {
            ynew[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        eval(t_new, &ynew, &mut k7, &mut stats)?;
        for i in 0..n {
            err[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let e = error_norm(&err, &y, &ynew, opts);
        if !e.is_finite() {
            return Err(Error::NonFiniteDerivative { t });
        }

        let fac11 = e.powf(0.2 - BETA * 0.75);
        if e <= 1.0 {
            let fac = (fac11 / fac_old.powf(BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_next = h / fac;
            fac_old = e.max(1e-4);
            stats.accepted += 1;

            let mut rcont: [Vec<f64>; 5] = Default::default();
            rcont[0] = y.clone();
            rcont[1] = (0..n).map(|i| ynew[i] - y[i]).collect();
            rcont[2] = (0..n).map(|i| h * k1[i] - rcont[1][i]).collect();
            rcont[3] = (0..n).map(|i| rcont[1][i] - h * k7[i] - rcont[2][i]).collect();
            rcont[4] = (0..n)
                .map(|i| h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]))
                .collect();
            segments.push(Segment { t0: t, h, rcont });

            std::mem::swap(&mut k1, &mut k7);
            std::mem::swap(&mut y, &mut ynew);
            t = t_new;
            if last {
                break;
            }
            if h_next.abs() > hmax {
                h_next = dir * hmax;
            }
            if reject_prev && h_next.abs() > h.abs() {
                h_next = h;
            }
            reject_prev = false;
            h = h_next;
        } else {
            stats.rejected += 1;
            reject_prev = true;
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
        }
    }

    Ok(DenseSolution {
        t_start: t0,
        t_end: t1,
        y_start: y0.to_vec(),
        y_end: y,
        segments,
        stats,
    })
}

#[allow(clippy::too_many_arguments)]
fn initial_step<E>(
    eval: &mut E,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    dir: f64,
    hmax: f64,
    opts: &IntegratorOptions,
    stats: &mut StepStats,
) -> Result<f64>
where
    E: FnMut(f64, &[f64], &mut [f64], &mut StepStats) -> Result<()>,
{
    let n = y0.len() as f64;
    let sc: Vec<f64> = y0.iter().map(|y| opts.abs_tol + opts.rel_tol * y.abs()).collect();
    let norm = |v: &[f64]| (v.iter().zip(&sc).map(|(x, s)| (x / s).powi(2)).sum::<f64>() / n).sqrt();
    let d0 = norm(y0);
    let d1 = norm(f0);
    let mut h = if d0 < 1e-10 || d1 < 1e-10 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(hmax);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + dir * h * f).collect();
    let mut f1 = vec![0.0; y0.len()];
    eval(t0 + dir * h, &y1, &mut f1, stats)?;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = norm(&diff) / h;
    let dm = d1.max(d2);
    let h1 = if dm <= 1e-15 {
        (1e-6f64).max(h * 1e-3)
    } else {
        (0.01 / dm).powf(0.2)
    };
    Ok(dir * (100.0 * h).min(h1).min(hmax))
}

/// Sampled trajectory with optional invariant series.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub coordinate_names: Vec<String>,
    pub states: Vec<Vec<f64>>,
    pub invariant_names: Vec<String>,
    /// `invariants[j][i]` is invariant `j` at `times[i]`.
    pub invariants: Vec<Vec<f64>>,
    /// Maximum relative deviation of each invariant from its initial value.
    pub drift: Vec<f64>,
    pub stats: StepStats,
}

/// Drift summary of one functional along a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftEntry {
    pub name: String,
    pub initial: f64,
    pub max_abs_drift: f64,
    /// `max_abs_drift / |initial|`; equals `max_abs_drift` when the initial value is 0.
    pub max_rel_drift: f64,
}

impl Trajectory {
    /// Builds a trajectory from explicit samples (strictly increasing or decreasing times).
    pub fn from_samples(times: Vec<f64>, coordinate_names: Vec<String>, states: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != states.len() {
            return Err(Error::Validation(format!(
                "{} times for {} states",
                times.len(),
                states.len()
            )));
        }
        if states.iter().any(|s| s.len() != coordinate_names.len()) {
            return Err(Error::Dimension("state length differs from coordinate count".into()));
        }
        check_monotone(&times)?;
        Ok(Self {
            times,
            coordinate_names,
            states,
            invariant_names: Vec::new(),
            invariants: Vec::new(),
            drift: Vec::new(),
            stats: StepStats::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Evaluates `set` along the trajectory and stores series and relative drift.
    pub fn attach_invariants(&mut self, set: &InvariantSet) -> Result<Vec<DriftEntry>> {
        let mut series = Vec::with_capacity(set.len());
        for item in set.iter() {
            series.push(self.states.iter().map(|y| item.eval(y)).collect::<Result<Vec<_>>>()?);
        }
        let report = drift_table(&set.names(), &series);
        self.invariant_names = set.names();
        self.drift = report.iter().map(|d| d.max_rel_drift).collect();
        self.invariants = series;
        Ok(report)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header: Vec<&str> = std::iter::once("t")
            .chain(self.coordinate_names.iter().map(String::as_str))
            .chain(self.invariant_names.iter().map(String::as_str))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (i, (t, y)) in self.times.iter().zip(&self.states).enumerate() {
            let mut row = format!("{t:?}");
            for v in y.iter().chain(self.invariants.iter().map(|s| &s[i])) {
                row.push(',');
                row.push_str(&format!("{v:?}"));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }
}

fn check_monotone(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::Validation("non-finite sample time".into()));
    }
    let inc = times.windows(2).all(|w| w[1] > w[0]);
    let dec = times.windows(2).all(|w| w[1] < w[0]);
    if inc || dec {
        Ok(())
    } else {
        Err(Error::Validation("sample times must be strictly monotone".into()))
    }
}

fn drift_table(names: &[String], series: &[Vec<f64>]) -> Vec<DriftEntry> {
    names
        .iter()
        .zip(series)
        .map(|(name, s)| {
            let initial = s[0];
            let max_abs_drift = s.iter().fold(0.0f64, |m, v| m.max((v - initial).abs()));
            let max_rel_drift = if initial != 0.0 {
                max_abs_drift / initial.abs()
            } else {
                max_abs_drift
            };
            DriftEntry {
                name: name.clone(),
                initial,
                max_abs_drift,
                max_rel_drift,
            }
        })
        .collect()
}

/// Drift of every functional in `set` along `traj`.
pub fn conservation_report(traj: &Trajectory, set: &InvariantSet) -> Result<Vec<DriftEntry>> {
    if traj.is_empty() {
        return Err(Error::Validation("empty trajectory".into()));
    }
    let mut series = Vec::with_capacity(set.len());
    for item in set.iter() {
        series.push(traj.states.iter().map(|y| item.eval(y)).collect::<Result<Vec<_>>>()?);
    }
    Ok(drift_table(&set.names(), &series))
}

/// Integrates and samples on `grid`, which must start at `t_span.0`, be
/// strictly monotone in the direction of integration and end at `t_span.1`.
pub fn integrate<F: VectorField>(
    field: F,
    y0: &[f64],
    t_span: (f64, f64),
    opts: &IntegratorOptions,
    grid: &[f64],
    coordinate_names: Vec<String>,
) -> Result<Trajectory> {
    if grid.is_empty() {
        return Err(Error::Validation("empty sampling grid".into()));
    }
    if coordinate_names.len() != y0.len() {
        return Err(Error::Dimension(format!(
            "{} coordinate names for a state of length {}",
            coordinate_names.len(),
            y0.len()
        )));
    }
    check_monotone(grid)?;
    let dir = (t_span.1 - t_span.0).signum();
    if grid[0] != t_span.0 || *grid.last().unwrap() != t_span.1 || (grid.len() > 1 && (grid[1] - grid[0]).signum() != dir)
    {
        return Err(Error::Validation("sampling grid must run from t0 to t1".into()));
    }
    let sol = integrate_dense(field, y0, t_span, opts)?;
    let states = grid.iter().map(|&t| sol.eval(t)).collect::<Result<Vec<_>>>()?;
    let mut traj = Trajectory::from_samples(grid.to_vec(), coordinate_names, states)?;
    traj.stats = sol.stats;
    Ok(traj)
}

/// `n + 1` equally spaced samples of `[t0, t1]` with exact endpoints.
pub fn uniform_grid(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n)
        .map(|i| if i == n { t1 } else { t0 + (t1 - t0) * i as f64 / n as f64 })
        .collect()
}

/// Flattened full-space field `Ż = i ∂f/∂Z⁺` of an observable.
pub fn observable_field(params: SystemParams, obs: Observable) -> impl Fn(f64, &[f64], &mut [f64]) -> Result<()> + Clone {
    let (rows, cols) = (params.n_plus(), params.n_minus());
    move |_t, y, out| {
        let state = WaveState::from_flat(rows, cols, y)?;
        let v = obs.vector_field(&params, &state)?;
        let flat = WaveState { z: v }.to_flat();
        out.copy_from_slice(&flat);
        Ok(())
    }
}

/// Integrates the flow of `obs` from `state` over `[0, t_end]` and attaches `invariants`.
pub fn integrate_observable_flow(
    params: &SystemParams,
    obs: Observable,
    state: &WaveState,
    t_end: f64,
    samples: usize,
    opts: &IntegratorOptions,
    invariants: &InvariantSet,
) -> Result<Trajectory> {
    let (rows, cols) = state.shape();
    let field = observable_field(params.clone(), obs);
    let mut traj = integrate(
        field,
        &state.to_flat(),
        (0.0, t_end),
        opts,
        &uniform_grid(0.0, t_end, samples),
        WaveState::coordinate_names(rows, cols),
    )?;
    traj.attach_invariants(invariants)?;
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{standard_invariants, NamedFunctional};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rotation(_t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = -y[1];
        out[1] = y[0];
        Ok(())
    }

    #[test]
    fn zero_field_gives_constant_trajectory() {
        let y0 = [0.3, -2.0, 7.5];
        let traj = integrate(
            |_t: f64, _y: &[f64], out: &mut [f64]| {
                out.fill(0.0);
                Ok(())
            },
            &y0,
            (0.0, 3.0),
            &IntegratorOptions::default(),
            &uniform_grid(0.0, 3.0, 10),
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        assert!(traj.states.iter().all(|s| s == &y0));
        let set = InvariantSet::new()
            .with(NamedFunctional::new("sum", |y: &[f64]| Ok(y.iter().sum())))
            .unwrap();
        let report = conservation_report(&traj, &set).unwrap();
        assert_eq!(report[0].max_abs_drift, 0.0);
        assert_eq!(report[0].max_rel_drift, 0.0);
    }

    #[test]
    fn exponential_rotation_reaches_minus_one() {
        let sol = integrate_dense(rotation, &[1.0, 0.0], (0.0, std::f64::consts::PI), &IntegratorOptions::new(1e-12, 1e-14))
            .unwrap();
        let y = sol.y_end();
        assert!((y[0] + 1.0).abs() < 1e-9 && y[1].abs() < 1e-9, "{y:?}");
    }

    #[test]
    fn dense_output_is_accurate_between_steps() {
        let sol = integrate_dense(rotation, &[1.0, 0.0], (0.0, 10.0), &IntegratorOptions::new(1e-11, 1e-13)).unwrap();
        for i in 0..200 {
            let t = 0.05 * i as f64 + 0.0123;
            let y = sol.eval(t).unwrap();
            assert!((y[0] - t.cos()).abs() < 1e-8 && (y[1] - t.sin()).abs() < 1e-8, "t = {t}");
        }
        assert!(sol.eval(10.5).is_err());
    }

    #[test]
    fn self_convergence_and_time_reversal() {
        let field = |_t: f64, y: &[f64], out: &mut [f64]| {
            // Van der Pol, mildly nonlinear
            out[0] = y[1];
            out[1] = 0.5 * (1.0 - y[0] * y[0]) * y[1] - y[0];
            Ok(())
        };
        let y0 = [1.5, 0.2];
        let tol = 1e-9;
        let coarse = integrate_dense(field, &y0, (0.0, 8.0), &IntegratorOptions::new(tol, tol)).unwrap();
        let fine = integrate_dense(field, &y0, (0.0, 8.0), &IntegratorOptions::new(tol / 2.0, tol / 2.0)).unwrap();
        let diff = coarse.y_end().iter().zip(fine.y_end()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 10.0 * tol * 100.0, "{diff:e}");

        let back = integrate_dense(field, fine.y_end(), (8.0, 0.0), &IntegratorOptions::new(tol / 2.0, tol / 2.0)).unwrap();
        let err = back.y_end().iter().zip(&y0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 100.0 * tol, "{err:e}");
    }

    #[test]
    fn underflow_and_non_finite_are_reported() {
        let blowup = |_t: f64, y: &[f64], out: &mut [f64]| {
            out[0] = y[0] * y[0];
            Ok(())
        };
        let err = integrate_dense(blowup, &[1.0], (0.0, 2.0), &IntegratorOptions::default()).unwrap_err();
        assert!(matches!(err, Error::StepUnderflow { .. } | Error::NonFiniteDerivative { .. }), "{err:?}");

        let nan = |_t: f64, _y: &[f64], out: &mut [f64]| {
            out[0] = f64::NAN;
            Ok(())
        };
        assert!(matches!(
            integrate_dense(nan, &[1.0], (0.0, 1.0), &IntegratorOptions::default()),
            Err(Error::NonFiniteDerivative { .. })
        ));
        assert!(integrate_dense(rotation, &[1.0, 0.0], (0.0, 1.0), &IntegratorOptions::new(0.0, 1e-9)).is_err());
    }

    #[test]
    fn quartic_flow_conserves_integrals() {
        let p = SystemParams::new(vec![0.3, -0.8], vec![0.5, 1.1, -0.7], 0.0, 4).unwrap();
        let s = WaveState::random(&mut ChaCha8Rng::seed_from_u64(21), 2, 3, 1.0);
        let set = InvariantSet::from_observables(&p, &standard_invariants(&p)).unwrap();
        let traj =
            integrate_observable_flow(&p, Observable::Quartic, &s, 20.0, 200, &IntegratorOptions::new(1e-10, 1e-12), &set)
                .unwrap();
        for (name, d) in traj.invariant_names.iter().zip(&traj.drift) {
            if name.starts_with('s') {
                continue;
            }
            assert!(*d <= 1e-7, "{name}: {d:e}");
        }
    }

    #[test]
    fn phase_rotation_keeps_moduli() {
        let p = SystemParams::new(vec![0.3, -0.8], vec![0.5, 1.1, -0.7], 0.0, 2).unwrap();
        let s = WaveState::random(&mut ChaCha8Rng::seed_from_u64(22), 2, 3, 1.0);
        let mut set = InvariantSet::new();
        for i in 0..6 {
            set.push(NamedFunctional::new(format!("m{i}"), move |y: &[f64]| {
                Ok(y[2 * i].powi(2) + y[2 * i + 1].powi(2))
            }))
            .unwrap();
        }
        let traj = integrate_observable_flow(
            &p,
            Observable::Hierarchy { k: 2, lambda: 0.0 },
            &s,
            5.0,
            50,
            &IntegratorOptions::new(1e-11, 1e-13),
            &set,
        )
        .unwrap();
        let report = conservation_report(&traj, &set).unwrap();
        assert!(report.iter().all(|d| d.max_abs_drift <= 1e-9), "{report:?}");
    }

    #[test]
    fn csv_layout() {
        let traj = Trajectory::from_samples(vec![0.0, 0.5], vec!["x".into()], vec![vec![1.0], vec![0.1]]).unwrap();
        assert_eq!(traj.to_csv_string(), "t,x\n0.0,1.0\n0.5,0.1\n");
        assert!(Trajectory::from_samples(vec![0.0, 0.0], vec!["x".into()], vec![vec![1.0], vec![1.0]]).is_err());
    }
}
