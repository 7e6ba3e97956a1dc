//! Time integration of `du/dt = f(t, u)` on a tape, with fixed-step Euler and
//! RK4 and adaptive Dormand-Prince 5(4).

use std::fmt;

use finn_autodiff::{Matrix, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Right-hand side of an ODE system whose state is a matrix.
pub trait OdeSystem {
    fn rhs(&self, tape: &mut Tape, t: f64, u: Var) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Rk4,
    DormandPrince45,
}

impl Scheme {
    pub fn is_adaptive(self) -> bool {
        self == Scheme::DormandPrince45
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    /// First trial step for adaptive schemes; substep length for fixed
    /// schemes (one step per output interval when unset).
    #[serde(default)]
    pub initial_step: Option<f64>,
    #[serde(default = "default_min_step")]
    pub min_step: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Upper bound on matrix entries held by the tape while recording.
    #[serde(default = "default_memory_budget")]
    pub memory_budget: usize,
}

fn default_atol() -> f64 {
    1e-6
}
fn default_rtol() -> f64 {
    1e-4
}
fn default_min_step() -> f64 {
    1e-12
}
fn default_max_steps() -> usize {
    200_000
}
fn default_memory_budget() -> usize {
    100_000_000
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self::new(Scheme::DormandPrince45)
    }
}

impl IntegratorConfig {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            atol: default_atol(),
            rtol: default_rtol(),
            initial_step: None,
            min_step: default_min_step(),
            max_steps: default_max_steps(),
            memory_budget: default_memory_budget(),
        }
    }

    pub fn with_tolerances(mut self, atol: f64, rtol: f64) -> Self {
        self.atol = atol;
        self.rtol = rtol;
        self
    }

    pub fn with_initial_step(mut self, h: f64) -> Self {
        self.initial_step = Some(h);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    StepUnderflow,
    MaxSteps,
    NonFinite,
    MemoryBudget,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evaluations: usize,
    pub last_step: f64,
}

/// Why and where integration stopped, with the outputs reached so far.
#[derive(Clone, Debug)]
pub struct IntegrationFailure {
    pub kind: FailureKind,
    pub t: f64,
    pub partial: Vec<Matrix>,
    pub stats: IntegrationStats,
}

impl fmt::Display for IntegrationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            FailureKind::StepUnderflow => "step size underflow",
            FailureKind::MaxSteps => "step limit reached",
            FailureKind::NonFinite => "non-finite state",
            FailureKind::MemoryBudget => "tape memory budget exceeded",
        };
        write!(
            f,
            "{what} at t = {} after {} accepted / {} rejected steps (last step {:e}, {} outputs reached)",
            self.t,
            self.stats.accepted,
            self.stats.rejected,
            self.stats.last_step,
            self.partial.len()
        )
    }
}

/// Values at the output times.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<Matrix>,
    pub stats: IntegrationStats,
}

/// Tape variables at the output times; gradients flow through them.
#[derive(Clone, Debug)]
pub struct RecordedTrajectory {
    pub states: Vec<Var>,
    pub stats: IntegrationStats,
}

const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
#[cfg(test)]
const B: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
/// Difference between the fifth- and fourth-order weights, including the
/// FSAL stage.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const ALPHA: f64 = 0.14;
const BETA: f64 = 0.08;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

struct Runner<'a> {
    system: &'a dyn OdeSystem,
    cfg: &'a IntegratorConfig,
    record: bool,
    stats: IntegrationStats,
    outputs: Vec<Matrix>,
    vars: Vec<Var>,
}

/// `y + sum(c_i * k_i)` skipping zero weights.
fn axpy(tape: &mut Tape, y: Var, terms: &[(Var, f64)]) -> Result<Var> {
    let mut all = vec![(y, 1.0)];
    all.extend(terms.iter().copied().filter(|(_, c)| *c != 0.0));
    Ok(tape.lin_comb(&all)?)
}

fn error_norm(err: &Matrix, y: &Matrix, y_new: &Matrix, atol: f64, rtol: f64) -> f64 {
    let n = err.len().max(1) as f64;
    let s: f64 = err
        .data()
        .iter()
        .zip(y.data())
        .zip(y_new.data())
        .map(|((e, a), b)| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

fn rms_scaled(v: &Matrix, scale: &Matrix) -> f64 {
    let n = v.len().max(1) as f64;
    (v.data().iter().zip(scale.data()).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n).sqrt()
}

impl<'a> Runner<'a> {
    fn fail(&self, kind: FailureKind, t: f64) -> CoreError {
        IntegrationFailure {
            kind,
            t,
            partial: self.outputs.clone(),
            stats: self.stats,
        }
        .into()
    }

    fn eval(&mut self, tape: &mut Tape, t: f64, y: Var) -> Result<Var> {
        self.stats.rhs_evaluations += 1;
        self.system.rhs(tape, t, y)
    }

    fn emit(&mut self, tape: &Tape, y: Var) {
        self.outputs.push(tape.value(y).clone());
        self.vars.push(y);
    }

    /// After an accepted step: free the step's intermediates when not
    /// recording, carrying the given variables over as fresh leaves.
    fn settle<const N: usize>(&self, tape: &mut Tape, base: usize, vars: [Var; N], t: f64) -> Result<[Var; N]> {
        if self.record {
            if tape.values_held() > self.cfg.memory_budget {
                return Err(self.fail(FailureKind::MemoryBudget, t));
            }
            return Ok(vars);
        }
        let values: Vec<Matrix> = vars.iter().map(|&v| tape.value(v).clone()).collect();
        tape.truncate(base);
        let mut out = vars;
        for (o, v) in out.iter_mut().zip(values) {
            *o = tape.leaf(v);
        }
        Ok(out)
    }

    fn fixed(&mut self, tape: &mut Tape, u0: Var, times: &[f64]) -> Result<()> {
        let base = tape.len();
        let mut y = u0;
        self.emit(tape, y);
        for w in times.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            let interval = t1 - t0;
            let n = match self.cfg.initial_step {
                Some(h) if h > 0.0 => (interval / h).ceil().max(1.0) as usize,
                _ => 1,
            };
            let h = interval / n as f64;
            for i in 0..n {
                if self.stats.accepted >= self.cfg.max_steps {
                    return Err(self.fail(FailureKind::MaxSteps, t0 + i as f64 * h));
                }
                let t = t0 + i as f64 * h;
                let next = match self.cfg.scheme {
                    Scheme::Euler => {
                        let k = self.eval(tape, t, y)?;
                        axpy(tape, y, &[(k, h)])?
                    }
                    _ => {
                        let k1 = self.eval(tape, t, y)?;
                        let y2 = axpy(tape, y, &[(k1, 0.5 * h)])?;
                        let k2 = self.eval(tape, t + 0.5 * h, y2)?;
                        let y3 = axpy(tape, y, &[(k2, 0.5 * h)])?;
                        let k3 = self.eval(tape, t + 0.5 * h, y3)?;
                        let y4 = axpy(tape, y, &[(k3, h)])?;
                        let k4 = self.eval(tape, t + h, y4)?;
                        axpy(tape, y, &[(k1, h / 6.0), (k2, h / 3.0), (k3, h / 3.0), (k4, h / 6.0)])?
                    }
                };
                self.stats.accepted += 1;
                self.stats.last_step = h;
                if !tape.value(next).all_finite() {
                    return Err(self.fail(FailureKind::NonFinite, t + h));
                }
                [y] = self.settle(tape, base, [next], t + h)?;
            }
            self.emit(tape, y);
        }
        Ok(())
    }

    fn initial_step(&mut self, tape: &mut Tape, t0: f64, y: Var, f0: Var, span: f64) -> Result<f64> {
        if let Some(h) = self.cfg.initial_step {
            return Ok(h.min(span));
        }
        let y0 = tape.value(y).clone();
        let f0v = tape.value(f0).clone();
        let scale = y0.map(|v| self.cfg.atol + self.cfg.rtol * v.abs());
        let d0 = rms_scaled(&y0, &scale);
        let d1 = rms_scaled(&f0v, &scale);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        let mark = tape.len();
        let y1 = axpy(tape, y, &[(f0, h0)])?;
        let f1 = self.eval(tape, t0 + h0, y1)?;
        let diff = Matrix::new(
            f0v.rows(),
            f0v.cols(),
            tape.value(f1).data().iter().zip(f0v.data()).map(|(a, b)| a - b).collect(),
        );
        tape.truncate(mark);
        let d2 = rms_scaled(&diff, &scale) / h0;
        let h1 = if d1.max(d2) <= 1e-15 || !d2.is_finite() {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        Ok((100.0 * h0).min(h1).min(span))
    }

    fn adaptive(&mut self, tape: &mut Tape, u0: Var, times: &[f64]) -> Result<()> {
        let base = tape.len();
        let mut y = u0;
        let mut t = times[0];
        self.emit(tape, y);
        let mut k1 = self.eval(tape, t, y)?;
        if !tape.value(k1).all_finite() {
            return Err(self.fail(FailureKind::NonFinite, t));
        }
        let span = times[times.len() - 1] - t;
        let mut h = self.initial_step(tape, t, y, k1, span)?;
        let mut prev_err: f64 = 1e-4;
        for &target in &times[1..] {
            let mut rejected = false;
            while t < target {
                if self.stats.accepted + self.stats.rejected >= self.cfg.max_steps {
                    return Err(self.fail(FailureKind::MaxSteps, t));
                }
                let remaining = target - t;
                let clipped = h >= remaining * (1.0 - 1e-12);
                let h_try = if clipped { remaining } else { h };
                if h_try < self.cfg.min_step && !clipped {
                    return Err(self.fail(FailureKind::StepUnderflow, t));
                }
                self.stats.last_step = h_try;
                let mark = tape.len();
                let mut k = vec![k1];
                for (stage, (row, c)) in A.iter().zip(C).enumerate() {
                    let terms: Vec<(Var, f64)> = k.iter().zip(row).map(|(&kv, &a)| (kv, h_try * a)).collect();
                    let ys = axpy(tape, y, &terms)?;
                    if stage == 5 {
                        // The sixth row holds the solution weights; its
                        // derivative is the first stage of the next step.
                        k.push(self.eval(tape, t + h_try, ys)?);
                        k.push(ys);
                        break;
                    }
                    k.push(self.eval(tape, t + c * h_try, ys)?);
                }
                let y_new = k.pop().expect("solution stage");
                let stage_values_finite = k.iter().all(|&v| tape.value(v).all_finite());
                let err = if stage_values_finite && tape.value(y_new).all_finite() {
                    let mut e = Matrix::zeros(tape.value(y).rows(), tape.value(y).cols());
                    for (&kv, &ec) in k.iter().zip(&E) {
                        if ec != 0.0 {
                            for (a, b) in e.data_mut().iter_mut().zip(tape.value(kv).data()) {
                                *a += h_try * ec * b;
                            }
                        }
                    }
                    error_norm(&e, tape.value(y), tape.value(y_new), self.cfg.atol, self.cfg.rtol)
                } else {
                    f64::INFINITY
                };
                if err <= 1.0 {
                    let mut factor = SAFETY * err.max(1e-10).powf(-ALPHA) * prev_err.powf(BETA);
                    factor = factor.clamp(MIN_FACTOR, MAX_FACTOR);
                    if rejected {
                        factor = factor.min(1.0);
                    }
                    prev_err = err.max(1e-4);
                    let proposal = h_try * factor;
                    h = if clipped && factor >= 1.0 { proposal.max(h) } else { proposal };
                    t = if clipped { target } else { t + h_try };
                    self.stats.accepted += 1;
                    rejected = false;
                    let k7 = k[6];
                    [y, k1] = self.settle(tape, base, [y_new, k7], t)?;
                } else {
                    tape.truncate(mark);
                    self.stats.rejected += 1;
                    rejected = true;
                    let factor = if err.is_finite() {
                        (SAFETY * err.powf(-ALPHA)).max(MIN_FACTOR)
                    } else {
                        MIN_FACTOR
                    };
                    h = h_try * factor.min(1.0);
                    if h < self.cfg.min_step {
                        let kind = if err.is_finite() {
                            FailureKind::StepUnderflow
                        } else {
                            FailureKind::NonFinite
                        };
                        return Err(self.fail(kind, t));
                    }
                }
            }
            self.emit(tape, y);
        }
        Ok(())
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(CoreError::Config("no output times".into()));
    }
    if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CoreError::Config("output times must be finite and strictly increasing".into()));
    }
    Ok(())
}

/// Integrates from `u0` at `times[0]` and returns the state at every output
/// time. The tape is used as scratch space and left as it was.
pub fn integrate(system: &dyn OdeSystem, tape: &mut Tape, u0: &Matrix, times: &[f64], cfg: &IntegratorConfig) -> Result<Trajectory> {
    check_times(times)?;
    let mark = tape.len();
    let u = tape.leaf(u0.clone());
    let mut runner = Runner {
        system,
        cfg,
        record: false,
        stats: IntegrationStats::default(),
        outputs: Vec::with_capacity(times.len()),
        vars: Vec::new(),
    };
    let result = if cfg.scheme.is_adaptive() {
        runner.adaptive(tape, u, times)
    } else {
        runner.fixed(tape, u, times)
    };
    tape.truncate(mark);
    result?;
    Ok(Trajectory {
        states: runner.outputs,
        stats: runner.stats,
    })
}

/// Integrates from the tape variable `u0`, keeping every accepted step on the
/// tape so that outputs can be differentiated with respect to `u0` and any
/// parameters the system reads.
pub fn integrate_recorded(
    system: &dyn OdeSystem,
    tape: &mut Tape,
    u0: Var,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<RecordedTrajectory> {
    check_times(times)?;
    let mut runner = Runner {
        system,
        cfg,
        record: true,
        stats: IntegrationStats::default(),
        outputs: Vec::with_capacity(times.len()),
        vars: Vec::with_capacity(times.len()),
    };
    if cfg.scheme.is_adaptive() {
        runner.adaptive(tape, u0, times)?;
    } else {
        runner.fixed(tape, u0, times)?;
    }
    Ok(RecordedTrajectory {
        states: runner.vars,
        stats: runner.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `du/dt = lambda * u`.
    struct Decay(f64);

    impl OdeSystem for Decay {
        fn rhs(&self, tape: &mut Tape, _t: f64, u: Var) -> Result<Var> {
            Ok(tape.scale(u, self.0)?)
        }
    }

    /// Harmonic oscillator on a 1x2 state.
    struct Oscillator;

    impl OdeSystem for Oscillator {
        fn rhs(&self, tape: &mut Tape, _t: f64, u: Var) -> Result<Var> {
            let x = tape.column(u, 0)?;
            let v = tape.column(u, 1)?;
            let nx = tape.neg(x)?;
            Ok(tape.hstack(&[v, nx])?)
        }
    }

    /// `du/dt = u^2`, blowing up at `t = 1/u0`.
    struct Blowup;

    impl OdeSystem for Blowup {
        fn rhs(&self, tape: &mut Tape, _t: f64, u: Var) -> Result<Var> {
            Ok(tape.powi(u, 2)?)
        }
    }

    fn times(n: usize, end: f64) -> Vec<f64> {
        (0..=n).map(|i| end * i as f64 / n as f64).collect()
    }

    #[test]
    fn tableau_is_consistent() {
        for (row, c) in A.iter().zip(C) {
            assert!((row.iter().sum::<f64>() - c).abs() < 1e-14);
        }
        assert!((B.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(E.iter().sum::<f64>().abs() < 1e-14);
        assert_eq!(A[5], B);
    }

    #[test]
    fn adaptive_decay_matches_exponential() {
        let mut tape = Tape::new();
        let cfg = IntegratorConfig::new(Scheme::DormandPrince45).with_tolerances(1e-10, 1e-10);
        let ts = times(10, 2.0);
        let traj = integrate(&Decay(-1.3), &mut tape, &Matrix::scalar(2.0), &ts, &cfg).unwrap();
        for (t, s) in ts.iter().zip(&traj.states) {
            assert!((s.data()[0] - 2.0 * (-1.3 * t).exp()).abs() < 1e-8);
        }
        assert!(tape.is_empty());
    }

    #[test]
    fn fixed_schemes_have_their_order() {
        let err = |scheme, h: f64| {
            let cfg = IntegratorConfig::new(scheme).with_initial_step(h);
            let mut tape = Tape::new();
            let traj = integrate(&Decay(-1.0), &mut tape, &Matrix::scalar(1.0), &[0.0, 1.0], &cfg).unwrap();
            (traj.states[1].data()[0] - (-1.0f64).exp()).abs()
        };
        let euler = err(Scheme::Euler, 0.01) / err(Scheme::Euler, 0.005);
        let rk4 = err(Scheme::Rk4, 0.1) / err(Scheme::Rk4, 0.05);
        assert!((euler - 2.0).abs() < 0.1, "{euler}");
        assert!((rk4 - 16.0).abs() < 1.0, "{rk4}");
    }

    #[test]
    fn oscillator_energy_is_kept_at_tight_tolerance() {
        let cfg = IntegratorConfig::new(Scheme::DormandPrince45).with_tolerances(1e-9, 1e-9);
        let mut tape = Tape::new();
        let traj = integrate(&Oscillator, &mut tape, &Matrix::row(vec![1.0, 0.0]), &times(20, 10.0), &cfg).unwrap();
        let last = traj.states.last().unwrap();
        assert!((last.get(0, 0) - 10.0f64.cos()).abs() < 1e-6);
        assert!((last.get(0, 1) + 10.0f64.sin()).abs() < 1e-6);
    }

    #[test]
    fn recorded_and_plain_runs_agree_bitwise() {
        for scheme in [Scheme::Euler, Scheme::Rk4, Scheme::DormandPrince45] {
            let cfg = IntegratorConfig::new(scheme).with_initial_step(0.05);
            let ts = times(5, 1.0);
            let mut tape = Tape::new();
            let plain = integrate(&Oscillator, &mut tape, &Matrix::row(vec![0.3, -0.2]), &ts, &cfg).unwrap();
            let mut tape = Tape::new();
            let u0 = tape.leaf(Matrix::row(vec![0.3, -0.2]));
            let rec = integrate_recorded(&Oscillator, &mut tape, u0, &ts, &cfg).unwrap();
            for (a, &b) in plain.states.iter().zip(&rec.states) {
                assert_eq!(a, tape.value(b));
            }
        }
    }

    #[test]
    fn recorded_gradient_of_decay() {
        let lambda = -0.7;
        let cfg = IntegratorConfig::new(Scheme::DormandPrince45).with_tolerances(1e-10, 1e-10);
        let mut tape = Tape::new();
        let u0 = tape.leaf(Matrix::scalar(1.5));
        let rec = integrate_recorded(&Decay(lambda), &mut tape, u0, &[0.0, 0.5, 2.0], &cfg).unwrap();
        let g = tape.backward_scalar(rec.states[2]).unwrap();
        let d = g.wrt(u0).unwrap().data()[0];
        assert!((d - (lambda * 2.0).exp()).abs() < 1e-8);
    }

    #[test]
    fn blowup_is_reported_with_partial_output() {
        let mut tape = Tape::new();
        let cfg = IntegratorConfig::new(Scheme::DormandPrince45);
        let e = integrate(&Blowup, &mut tape, &Matrix::scalar(1.0), &[0.0, 0.5, 2.0], &cfg).unwrap_err();
        let CoreError::Integration(f) = e else { panic!("{e}") };
        assert!(matches!(f.kind, FailureKind::StepUnderflow | FailureKind::NonFinite | FailureKind::MaxSteps));
        assert_eq!(f.partial.len(), 2);
        assert!(f.t > 0.5 && f.t < 1.01, "{f}");
    }

    #[test]
    fn euler_reports_non_finite_states() {
        let mut tape = Tape::new();
        let cfg = IntegratorConfig::new(Scheme::Euler);
        let e = integrate(&Blowup, &mut tape, &Matrix::scalar(1e200), &[0.0, 1.0, 2.0, 3.0], &cfg).unwrap_err();
        let CoreError::Integration(f) = e else { panic!("{e}") };
        assert_eq!(f.kind, FailureKind::NonFinite);
    }

    #[test]
    fn memory_budget_is_enforced() {
        let mut cfg = IntegratorConfig::new(Scheme::Rk4).with_initial_step(1e-3);
        cfg.memory_budget = 1000;
        let mut tape = Tape::new();
        let u0 = tape.leaf(Matrix::scalar(1.0));
        let e = integrate_recorded(&Decay(-1.0), &mut tape, u0, &[0.0, 1.0], &cfg).unwrap_err();
        let CoreError::Integration(f) = e else { panic!("{e}") };
        assert_eq!(f.kind, FailureKind::MemoryBudget);
    }

    #[test]
    fn output_times_must_increase() {
        let mut tape = Tape::new();
        let cfg = IntegratorConfig::default();
        assert!(integrate(&Decay(1.0), &mut tape, &Matrix::scalar(1.0), &[0.0, 0.0], &cfg).is_err());
        assert!(integrate(&Decay(1.0), &mut tape, &Matrix::scalar(1.0), &[], &cfg).is_err());
    }

    #[test]
    fn single_output_time_returns_the_initial_state() {
        let mut tape = Tape::new();
        let traj = integrate(&Decay(1.0), &mut tape, &Matrix::scalar(3.0), &[0.5], &IntegratorConfig::default()).unwrap();
        assert_eq!(traj.states, vec![Matrix::scalar(3.0)]);
    }
}
