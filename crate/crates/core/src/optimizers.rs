//! Adam, its `β1 = 0` RMSProp reduction, and SGD with constant or explicit
//! step schedules.
//!
//! One Adam step, coordinatewise:
//!
//! ```text
//! m_t = β1 m_{t-1} + (1 − β1) g_t
//! v_t = β2 v_{t-1} + (1 − β2) g_t²
//! γ_t = γ / (√v_t + ε)
//! x_{t+1} = x_t − γ_t m_t
//! ```
//!
//! No bias correction is applied. The calibrated parameterization sets
//! `β2 = 1 − 1/T` and `γ = η/√T` for a horizon `T ≥ 10`.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, Error, Result};
use crate::kernel::{RealVec, RngStream};
use crate::problems::Oracle;

/// Smallest horizon admitted by the calibrated parameterization.
pub const MIN_CALIBRATED_HORIZON: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    gamma: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    v0: f64,
    horizon: usize,
    /// `Some(η)` when built by [`AdamParams::calibrate`].
    eta: Option<f64>,
}

impl AdamParams {
    pub fn new(gamma: f64, beta1: f64, beta2: f64, eps: f64, v0: f64, horizon: usize) -> Result<Self> {
        let mut bad = Vec::new();
        if !(gamma.is_finite() && gamma > 0.0) {
            bad.push(alloc::format!("gamma must be > 0 (got {gamma})"));
        }
        if !(0.0..1.0).contains(&beta1) {
            bad.push(alloc::format!("beta1 must lie in [0,1) (got {beta1})"));
        }
        if !(0.0..1.0).contains(&beta2) {
            bad.push(alloc::format!("beta2 must lie in [0,1) (got {beta2})"));
        }
        if !(eps.is_finite() && eps > 0.0) {
            bad.push(alloc::format!("eps must be > 0 (got {eps})"));
        }
        if !(v0.is_finite() && v0 > 0.0) {
            bad.push(alloc::format!("v0 must be > 0 (got {v0})"));
        }
        if horizon == 0 {
            bad.push("horizon must be >= 1".into());
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad.join("; ")));
        }
        Ok(Self { gamma, beta1, beta2, eps, v0, horizon, eta: None })
    }

    /// `β2 = 1 − 1/T`, `γ = η/√T`.
    pub fn calibrate(eta: f64, horizon: usize, beta1: f64, eps: f64, v0: f64) -> Result<Self> {
        if horizon < MIN_CALIBRATED_HORIZON {
            return Err(config_err!(
                "calibrated Adam requires T >= {MIN_CALIBRATED_HORIZON}, got {horizon}"
            ));
        }
        if !(eta.is_finite() && eta > 0.0) {
            return Err(config_err!("eta must be > 0, got {eta}"));
        }
        let t = horizon as f64;
        let mut p = Self::new(eta / libm::sqrt(t), beta1, 1.0 - 1.0 / t, eps, v0, horizon)?;
        p.eta = Some(eta);
        Ok(p)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn beta1(&self) -> f64 {
        self.beta1
    }
    pub fn beta2(&self) -> f64 {
        self.beta2
    }
    pub fn eps(&self) -> f64 {
        self.eps
    }
    pub fn v0(&self) -> f64 {
        self.v0
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn eta(&self) -> Option<f64> {
        self.eta
    }
    pub fn is_calibrated(&self) -> bool {
        self.eta.is_some()
    }

    /// `γ_0 = γ/(√v0 + ε)`, the preconditioner before the first step.
    pub fn gamma0(&self) -> f64 {
        self.gamma / (libm::sqrt(self.v0) + self.eps)
    }
}

/// Largest `η` admitted by the step-size condition
/// `1/η ≥ max{8dε/v^{3/2} + 8d/√v, D_{β1} β1 √(dL)/(1 − β1), 1}`.
///
/// `eps = 0` is accepted here even though Adam itself needs `ε > 0`.
pub fn max_eta(d: usize, v0: f64, eps: f64, beta1: f64, l: f64) -> Result<f64> {
    if d == 0 {
        return Err(domain_err!("d must be positive"));
    }
    if !(v0.is_finite() && v0 > 0.0) {
        return Err(domain_err!("v0 must be > 0, got {v0}"));
    }
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(domain_err!("eps must be >= 0, got {eps}"));
    }
    if !(l.is_finite() && l > 0.0) {
        return Err(domain_err!("L must be > 0, got {l}"));
    }
    let d = d as f64;
    let first = 8.0 * d * eps / libm::pow(v0, 1.5) + 8.0 * d / libm::sqrt(v0);
    let second = if beta1 == 0.0 {
        0.0
    } else {
        d_beta1(beta1)? * beta1 * libm::sqrt(d * l) / (1.0 - beta1)
    };
    if !(0.0..1.0).contains(&beta1) {
        return Err(domain_err!("beta1 must lie in [0,1), got {beta1}"));
    }
    Ok(1.0 / first.max(second).max(1.0))
}

const D_BETA1_SCAN_CAP: usize = 10_000_000;

/// `D_{β1} = √(4(1 − β1) sup_{T≥10} Σ_{r<T} ρ(T)^r)` with `ρ(T) = Tβ1/(T − 1)`.
///
/// The sup is found by scanning `T = 10, 11, …`. For `ρ(T) < 1` every later
/// sum is below `1/(1 − ρ(T))` (since `ρ` decreases in `T`), so the scan
/// stops once the running maximum reaches that bound.
pub fn d_beta1(beta1: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&beta1) {
        return Err(domain_err!("beta1 must lie in [0,1), got {beta1}"));
    }
    if beta1 == 0.0 {
        return Ok(2.0);
    }
    let geometric = |t: usize| -> (f64, f64) {
        let tf = t as f64;
        let rho = tf * beta1 / (tf - 1.0);
        let sum = if rho == 1.0 { tf } else { (1.0 - libm::pow(rho, tf)) / (1.0 - rho) };
        (rho, sum)
    };
    let mut best = 0.0f64;
    for t in MIN_CALIBRATED_HORIZON..=D_BETA1_SCAN_CAP {
        let (rho, sum) = geometric(t);
        best = best.max(sum);
        if rho < 1.0 && best >= 1.0 / (1.0 - rho) {
            return Ok(libm::sqrt(4.0 * (1.0 - beta1) * best));
        }
    }
    Err(domain_err!(
        "sup over T for beta1 = {beta1} not certified within T <= {D_BETA1_SCAN_CAP}"
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: usize,
    pub x: RealVec,
    pub m: RealVec,
    pub v: RealVec,
}

pub fn adam_init(params: &AdamParams, x1: &[f64]) -> Result<AdamState> {
    let x = RealVec::new(x1.to_vec())?;
    let d = x.dim();
    Ok(AdamState { t: 0, x, m: RealVec::zeros(d), v: RealVec::filled(d, params.v0) })
}

/// In-place Adam update on raw slices. Returns `false` if `x` left the
/// finite range.
#[inline]
pub(crate) fn adam_update(
    params: &AdamParams,
    x: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    g: &[f64],
    gamma_out: &mut [f64],
) -> bool {
    let (b1, b2) = (params.beta1, params.beta2);
    let mut finite = true;
    for i in 0..x.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * (g[i] * g[i]);
        gamma_out[i] = params.gamma / (libm::sqrt(v[i]) + params.eps);
        x[i] -= gamma_out[i] * m[i];
        finite &= x[i].is_finite() && v[i].is_finite();
    }
    finite
}

/// One step of Adam. Returns the new state and the preconditioner `γ_t`.
pub fn adam_step(state: &AdamState, g: &[f64], params: &AdamParams) -> Result<(AdamState, RealVec)> {
    let d = state.x.dim();
    if g.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: g.len() });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stochastic gradient"));
    }
    let (mut x, mut m, mut v) = (state.x.to_vec(), state.m.to_vec(), state.v.to_vec());
    let mut gamma = alloc::vec![0.0; d];
    let t = state.t + 1;
    if !adam_update(params, &mut x, &mut m, &mut v, g, &mut gamma) {
        return Err(Error::Divergence { step: t });
    }
    let next = AdamState {
        t,
        x: RealVec::from_raw(x),
        m: RealVec::from_raw(m),
        v: RealVec::from_raw(v),
    };
    Ok((next, RealVec::from_raw(gamma)))
}

/// `x' = x − η g`.
pub fn sgd_step(x: &[f64], g: &[f64], eta: f64) -> Result<RealVec> {
    if x.len() != g.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: g.len() });
    }
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(config_err!("SGD step size must be finite and >= 0, got {eta}"));
    }
    let out: Vec<f64> = x.iter().zip(g).map(|(xi, gi)| xi - eta * gi).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: 0 });
    }
    Ok(RealVec::from_raw(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant(f64),
    Explicit(Vec<f64>),
}

impl StepSchedule {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        match self {
            StepSchedule::Constant(g) if !(g.is_finite() && *g >= 0.0) => {
                Err(config_err!("SGD step size must be finite and >= 0, got {g}"))
            }
            StepSchedule::Constant(_) => Ok(()),
            StepSchedule::Explicit(list) => {
                if list.len() != horizon {
                    return Err(config_err!(
                        "schedule length {} does not match horizon {horizon}",
                        list.len()
                    ));
                }
                match list.iter().position(|e| !(e.is_finite() && *e >= 0.0)) {
                    Some(k) => Err(config_err!("schedule entry {} is negative or non-finite", k + 1)),
                    None => Ok(()),
                }
            }
        }
    }

    /// Step size at 1-based step `t`.
    #[inline]
    pub fn at(&self, t: usize) -> f64 {
        match self {
            StepSchedule::Constant(g) => *g,
            StepSchedule::Explicit(list) => list[t - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Adam(AdamParams),
    Sgd { schedule: StepSchedule },
}

impl OptimizerSpec {
    pub fn sgd_constant(gamma: f64) -> Self {
        OptimizerSpec::Sgd { schedule: StepSchedule::Constant(gamma) }
    }

    pub fn adam_params(&self) -> Option<&AdamParams> {
        match self {
            OptimizerSpec::Adam(p) => Some(p),
            OptimizerSpec::Sgd { .. } => None,
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        match self {
            OptimizerSpec::Adam(_) => Ok(()),
            OptimizerSpec::Sgd { schedule } => schedule.validate(horizon),
        }
    }
}

/// Borrowed view of one completed step, handed to a [`StepObserver`].
pub struct StepView<'a> {
    pub t: usize,
    pub x: &'a [f64],
    pub g: &'a [f64],
    pub grad: &'a [f64],
    pub x_next: &'a [f64],
    pub kind: StepKind<'a>,
}

pub enum StepKind<'a> {
    Adam { m: &'a [f64], v: &'a [f64], gamma: &'a [f64] },
    Sgd { eta: f64 },
}

pub trait StepObserver {
    fn observe(&mut self, step: &StepView<'_>);
}

/// Runs `horizon` steps, calling `obs` after each. On a non-finite iterate
/// or gradient, stops and returns the failing step index; steps before it
/// have been observed.
pub fn drive<O: StepObserver>(
    spec: &OptimizerSpec,
    oracle: &Oracle,
    x1: &[f64],
    horizon: usize,
    stream: &mut RngStream,
    obs: &mut O,
) -> core::result::Result<(), usize> {
    let d = x1.len();
    let mut x = x1.to_vec();
    let mut x_next = alloc::vec![0.0; d];
    let mut g = alloc::vec![0.0; d];
    let mut grad = alloc::vec![0.0; d];
    match spec {
        OptimizerSpec::Adam(params) => {
            let mut m = alloc::vec![0.0; d];
            let mut v = alloc::vec![params.v0; d];
            let mut gamma = alloc::vec![0.0; d];
            for t in 1..=horizon {
                oracle.objective().grad_into(&x, &mut grad);
                g.copy_from_slice(&grad);
                oracle.add_noise(stream, &mut g);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(t);
                }
                x_next.copy_from_slice(&x);
                if !adam_update(params, &mut x_next, &mut m, &mut v, &g, &mut gamma) {
                    return Err(t);
                }
                obs.observe(&StepView {
                    t,
                    x: &x,
                    g: &g,
                    grad: &grad,
                    x_next: &x_next,
                    kind: StepKind::Adam { m: &m, v: &v, gamma: &gamma },
                });
                core::mem::swap(&mut x, &mut x_next);
            }
        }
        OptimizerSpec::Sgd { schedule } => {
            for t in 1..=horizon {
                let eta = schedule.at(t);
                oracle.objective().grad_into(&x, &mut grad);
                g.copy_from_slice(&grad);
                oracle.add_noise(stream, &mut g);
                let mut finite = true;
                for i in 0..d {
                    x_next[i] = x[i] - eta * g[i];
                    finite &= x_next[i].is_finite() && g[i].is_finite();
                }
                if !finite {
                    return Err(t);
                }
                obs.observe(&StepView {
                    t,
                    x: &x,
                    g: &g,
                    grad: &grad,
                    x_next: &x_next,
                    kind: StepKind::Sgd { eta },
                });
                core::mem::swap(&mut x, &mut x_next);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub objective_id: String,
    pub oracle: Oracle,
    pub optimizer: OptimizerSpec,
    pub master_seed: u64,
    pub run_index: u64,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepExtra {
    Adam { m: RealVec, v: RealVec, gamma: RealVec },
    Sgd { eta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: RealVec,
    pub g: RealVec,
    pub grad: RealVec,
    pub extra: StepExtra,
}

/// Full per-step record of a run. `records[k]` holds step `t = k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    pub records: Vec<StepRecord>,
    /// `x_{T+1}`, or the last finite iterate of a diverged run.
    pub terminal: RealVec,
    pub diverged_at: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.terminal.dim()
    }

    pub fn oracle(&self) -> &Oracle {
        &self.meta.oracle
    }

    pub fn adam_params(&self) -> Option<&AdamParams> {
        self.meta.optimizer.adam_params()
    }

    pub fn record(&self, t: usize) -> &StepRecord {
        &self.records[t - 1]
    }

    /// `x_t` for `1 ≤ t ≤ len + 1`.
    pub fn x(&self, t: usize) -> &[f64] {
        if t == self.records.len() + 1 {
            &self.terminal
        } else {
            &self.records[t - 1].x
        }
    }

    fn adam_field(&self, t: usize, pick: fn(&StepExtra) -> Option<&RealVec>) -> &[f64] {
        pick(&self.records[t - 1].extra).expect("Adam trajectory")
    }

    /// `m_t` for `t ≥ 1` (Adam only).
    pub fn m(&self, t: usize) -> &[f64] {
        self.adam_field(t, |e| match e {
            StepExtra::Adam { m, .. } => Some(m),
            StepExtra::Sgd { .. } => None,
        })
    }

    /// `v_t` for `t ≥ 1` (Adam only).
    pub fn v(&self, t: usize) -> &[f64] {
        self.adam_field(t, |e| match e {
            StepExtra::Adam { v, .. } => Some(v),
            StepExtra::Sgd { .. } => None,
        })
    }

    /// `γ_t` for `t ≥ 1` (Adam only).
    pub fn gamma(&self, t: usize) -> &[f64] {
        self.adam_field(t, |e| match e {
            StepExtra::Adam { gamma, .. } => Some(gamma),
            StepExtra::Sgd { .. } => None,
        })
    }

    /// `v_t` with the `v_0 = v0·1` convention at `t = 0`.
    pub fn v_or_init(&self, t: usize, i: usize) -> f64 {
        match t {
            0 => self.adam_params().expect("Adam trajectory").v0,
            _ => self.v(t)[i],
        }
    }

    /// `γ_t` with the `γ_0 = γ/(√v0 + ε)` convention at `t = 0`.
    pub fn gamma_or_init(&self, t: usize, i: usize) -> f64 {
        match t {
            0 => self.adam_params().expect("Adam trajectory").gamma0(),
            _ => self.gamma(t)[i],
        }
    }

    /// `m_t` with `m_0 = 0`.
    pub fn m_or_init(&self, t: usize, i: usize) -> f64 {
        match t {
            0 => 0.0,
            _ => self.m(t)[i],
        }
    }

    pub fn eta_at(&self, t: usize) -> Option<f64> {
        match self.records[t - 1].extra {
            StepExtra::Sgd { eta } => Some(eta),
            StepExtra::Adam { .. } => None,
        }
    }
}

struct Recorder {
    records: Vec<StepRecord>,
    last: Vec<f64>,
}

impl StepObserver for Recorder {
    fn observe(&mut self, s: &StepView<'_>) {
        let extra = match s.kind {
            StepKind::Adam { m, v, gamma } => StepExtra::Adam {
                m: RealVec::from_raw(m.to_vec()),
                v: RealVec::from_raw(v.to_vec()),
                gamma: RealVec::from_raw(gamma.to_vec()),
            },
            StepKind::Sgd { eta } => StepExtra::Sgd { eta },
        };
        self.records.push(StepRecord {
            t: s.t,
            x: RealVec::from_raw(s.x.to_vec()),
            g: RealVec::from_raw(s.g.to_vec()),
            grad: RealVec::from_raw(s.grad.to_vec()),
            extra,
        });
        self.last.copy_from_slice(s.x_next);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    Invalid(Error),
    /// The partial trajectory holds every step before `step`.
    Diverged { step: usize, partial: Box<Trajectory> },
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Invalid(e)
    }
}

impl core::fmt::Display for RunError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            RunError::Invalid(e) => e.fmt(f),
            RunError::Diverged { step, .. } => write!(f, "iterate diverged at step {step}"),
        }
    }
}

impl core::error::Error for RunError {}

pub fn run_trajectory(
    spec: &OptimizerSpec,
    oracle: &Oracle,
    x1: &[f64],
    horizon: usize,
    stream: &mut RngStream,
) -> core::result::Result<Trajectory, RunError> {
    if horizon < 1 {
        return Err(config_err!("horizon must be >= 1").into());
    }
    if x1.len() != oracle.dim() {
        return Err(Error::DimensionMismatch { expected: oracle.dim(), got: x1.len() }.into());
    }
    let x1 = RealVec::new(x1.to_vec())?;
    spec.validate(horizon)?;
    let mut rec = Recorder { records: Vec::with_capacity(horizon), last: x1.to_vec() };
    let outcome = drive(spec, oracle, &x1, horizon, stream, &mut rec);
    let meta = TrajectoryMeta {
        objective_id: oracle.objective().id().into(),
        oracle: oracle.clone(),
        optimizer: spec.clone(),
        master_seed: stream.master_seed(),
        run_index: stream.run_index(),
        horizon,
    };
    let traj = Trajectory {
        meta,
        records: rec.records,
        terminal: RealVec::from_raw(rec.last),
        diverged_at: outcome.err(),
    };
    match traj.diverged_at {
        None => Ok(traj),
        Some(step) => Err(RunError::Diverged { step, partial: Box::new(traj) }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::stage;
    use crate::problems::{Noise, Objective};

    #[test]
    fn calibrate_examples() {
        let p = AdamParams::calibrate(1.0, 100, 0.0, 1e-8, 1.0).unwrap();
        assert_eq!(p.beta2(), 0.99);
        assert!((p.gamma() - 0.1).abs() < 1e-16);
        let p = AdamParams::calibrate(0.5, 25, 0.0, 1e-8, 1.0).unwrap();
        assert_eq!(p.gamma(), 0.1);
        assert_eq!(p.beta2(), 0.96);
        assert!(matches!(AdamParams::calibrate(1.0, 9, 0.0, 1e-8, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn params_reject_zero_eps() {
        assert!(AdamParams::new(0.1, 0.0, 0.9, 0.0, 1.0, 10).is_err());
    }

    #[test]
    fn max_eta_examples() {
        assert_eq!(max_eta(1, 1.0, 0.0, 0.0, 1.0).unwrap(), 0.125);
        assert_eq!(max_eta(1, 1.0, 1.0, 0.0, 1.0).unwrap(), 0.0625);
    }

    #[test]
    fn d_beta1_examples() {
        assert_eq!(d_beta1(0.0).unwrap(), 2.0);
        let d = d_beta1(0.5).unwrap();
        assert!((d - 2.1184).abs() < 1e-4, "{d}");
        assert!(d_beta1(0.9).unwrap() > d);
        assert!(d_beta1(0.99).is_ok());
        assert!(d_beta1(1.0).is_err());
    }

    #[test]
    fn adam_step_hand_case() {
        let p = AdamParams { gamma: 1.0, beta1: 0.5, beta2: 0.5, eps: 0.0, v0: 1.0, horizon: 1, eta: None };
        let s = adam_init(&p, &[1.0]).unwrap();
        let (s, gamma) = adam_step(&s, &[1.0], &p).unwrap();
        assert_eq!((s.m[0], s.v[0], gamma[0], s.x[0]), (0.5, 1.0, 1.0, 0.5));
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_x() {
        let p = AdamParams::new(0.3, 0.9, 0.8, 1e-8, 2.0, 5).unwrap();
        let s = adam_init(&p, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(s.v.as_slice(), &[2.0; 3]);
        assert!(s.m.iter().all(|m| *m == 0.0));
        let (s2, _) = adam_step(&s, &[0.0; 3], &p).unwrap();
        assert_eq!(s2.x, s.x);
        assert_eq!(s2.v[0], 0.8 * 2.0);
    }

    #[test]
    fn sgd_step_examples() {
        assert_eq!(sgd_step(&[1.0], &[1.0], 0.5).unwrap().as_slice(), &[0.5]);
        assert_eq!(sgd_step(&[1.0, 2.0], &[3.0, 4.0], 0.0).unwrap().as_slice(), &[1.0, 2.0]);
        assert!(sgd_step(&[1.0], &[1.0], -0.1).is_err());
    }

    #[test]
    fn sgd_on_half_square_contracts() {
        let oracle = Oracle::new(Objective::half_square(), Noise::Zero).unwrap();
        let spec = OptimizerSpec::sgd_constant(0.25);
        let mut s = RngStream::derive(0, 0, stage::NOISE);
        let tr = run_trajectory(&spec, &oracle, &[1.0], 5, &mut s).unwrap();
        for t in 1..=5 {
            assert_eq!(tr.x(t + 1)[0], 0.75 * tr.x(t)[0]);
        }
    }

    #[test]
    fn explicit_schedule_length_checked() {
        let oracle = Oracle::new(Objective::half_square(), Noise::Zero).unwrap();
        let spec = OptimizerSpec::Sgd { schedule: StepSchedule::Explicit(alloc::vec![0.1; 3]) };
        let mut s = RngStream::derive(0, 0, stage::NOISE);
        assert!(matches!(
            run_trajectory(&spec, &oracle, &[1.0], 4, &mut s),
            Err(RunError::Invalid(Error::Config(_)))
        ));
    }

    #[test]
    fn divergence_returns_partial() {
        let oracle = Oracle::new(Objective::quadratic_diag(alloc::vec![1.0]).unwrap(), Noise::Zero).unwrap();
        // Step 3.0 multiplies x by -2 each step; overflow after ~1024 steps.
        let spec = OptimizerSpec::sgd_constant(3.0);
        let mut s = RngStream::derive(0, 0, stage::NOISE);
        match run_trajectory(&spec, &oracle, &[1.0], 2000, &mut s) {
            Err(RunError::Diverged { step, partial }) => {
                assert_eq!(partial.len(), step - 1);
                assert!(partial.terminal.iter().all(|v| v.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
