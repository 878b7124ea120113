//! One-shock hard instances for SGD on `f(x) = ½x²` with three-point noise.
//!
//! A rare shock of size `A` hits early, and the deterministic decay of the
//! recursion afterwards turns it into a large trajectory energy. Everything
//! here is closed form except [`mc_event_prob`], which simulates the real
//! i.i.d. recursion.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, precondition_err, Error, Result};
use crate::kernel::{stage, RealVec, RngStream};
use crate::optimizers::{
    drive, OptimizerSpec, StepExtra, StepKind, StepObserver, StepRecord, StepSchedule, StepView, Trajectory,
    TrajectoryMeta,
};
use crate::problems::{Noise, Objective, Oracle};

/// Smallest Monte Carlo sample accepted by [`mc_event_prob`].
/// Relative allowance when comparing a shocked energy to a bound it attains
/// with equality (the worst shock position sums the same geometric series).
pub const BOUND_ROUNDING: f64 = 1e-12;

pub const MIN_MC_RUNS: u64 = 1000;

fn instance_err(clause: impl Into<String>) -> Error {
    Error::InstanceInvalid(clause.into())
}

/// `γ² Σ_{r=0}^{T−⌊T/2⌋−1} (1−γ)^{2r}`.
pub fn response_factor(gamma: f64, horizon: usize) -> f64 {
    let q = (1.0 - gamma) * (1.0 - gamma);
    let terms = horizon - horizon / 2;
    let (mut sum, mut pow) = (0.0, 1.0);
    for _ in 0..terms {
        sum += pow;
        pow *= q;
    }
    gamma * gamma * sum
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstStepInstance {
    pub gamma: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub delta: f64,
    pub x_init: f64,
    #[serde(rename = "A")]
    pub amplitude: f64,
    pub p: f64,
    pub m: usize,
    /// Response factor, defined for `γ < 1`.
    #[serde(rename = "R")]
    pub response: Option<f64>,
    pub delta_threshold: f64,
}

/// `δ` threshold and the name of the binding clause.
fn const_threshold(gamma: f64, horizon: usize, response: Option<f64>) -> (f64, &'static str) {
    let mut best = (1.0 / 64.0, "delta < 1/64");
    if let Some(r) = response {
        let t = horizon as f64;
        let c2 = libm::exp(-1.0 / (32.0 * r * libm::sqrt(t)));
        let c3 = libm::exp(-1.0 / libm::sqrt(32.0 * gamma * t * r));
        if c2 < best.0 {
            best = (c2, "delta < exp(-1/(32 R sqrt(T)))");
        }
        if c3 < best.0 {
            best = (c3, "delta < exp(-1/sqrt(32 gamma T R))");
        }
    }
    best
}

pub fn build_const_instance(gamma: f64, horizon: usize, delta: f64, x_init: f64) -> Result<ConstStepInstance> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(config_err!("gamma must be > 0, got {gamma}"));
    }
    if horizon < 10 {
        return Err(config_err!("constant-step instances require T >= 10, got {horizon}"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(config_err!("delta must lie in (0,1), got {delta}"));
    }
    if !x_init.is_finite() {
        return Err(Error::NonFinite("x_init"));
    }
    let t = horizon as f64;
    let response = (gamma < 1.0).then(|| response_factor(gamma, horizon));
    let (delta_threshold, clause) = const_threshold(gamma, horizon, response);
    if delta >= delta_threshold {
        return Err(instance_err(alloc::format!(
            "{clause} violated: delta = {delta}, threshold = {delta_threshold}"
        )));
    }
    let a2 = t / (16.0 * delta);
    Ok(ConstStepInstance {
        gamma,
        horizon,
        delta,
        x_init,
        amplitude: libm::sqrt(a2),
        p: 16.0 * delta / t,
        m: horizon / 2,
        response,
        delta_threshold,
    })
}

/// `+1` if `a ≤ 0`, else `−1`; then `|a − σb| = |a| + b ≥ b`.
pub fn sign_choice(a: f64, b: f64) -> f64 {
    debug_assert!(b >= 0.0);
    if a <= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShockCase {
    /// One shock of a prescribed sign (used for `γ < 1`).
    Signed,
    /// One shock of either sign (used for `γ ≥ 1`).
    Unsigned,
}

/// Probability that exactly one of the first `m` of `T − 1` noises is
/// nonzero (with a prescribed sign when `signed`) and all others vanish,
/// for nonzero probability `p`.
pub fn one_shock_probability(horizon: usize, p: f64, m: usize, case: ShockCase) -> f64 {
    let per = match case {
        ShockCase::Signed => p / 2.0,
        ShockCase::Unsigned => p,
    };
    m as f64 * per * libm::pow(1.0 - p, horizon as f64 - 2.0)
}

pub fn one_shock_prob_exact(inst: &ConstStepInstance, case: ShockCase) -> Result<f64> {
    match (case, inst.gamma < 1.0) {
        (ShockCase::Signed, true) | (ShockCase::Unsigned, false) => {
            Ok(one_shock_probability(inst.horizon, inst.p, inst.m, case))
        }
        (ShockCase::Signed, false) => Err(precondition_err!("signed events are defined for gamma < 1")),
        (ShockCase::Unsigned, true) => Err(precondition_err!("unsigned events are defined for gamma >= 1")),
    }
}

/// Signed shocks for `γ < 1`, unsigned for `γ ≥ 1`.
pub fn natural_case(inst: &ConstStepInstance) -> ShockCase {
    if inst.gamma < 1.0 {
        ShockCase::Signed
    } else {
        ShockCase::Unsigned
    }
}

fn half_square_oracle(amplitude: f64) -> Oracle {
    Oracle::new(Objective::half_square(), Noise::ThreePoint { amplitude }).expect("amplitude >= 1")
}

/// SGD trajectory on `½x²` driven by the explicit noise sequence `xi`
/// (length `T`), with steps from `schedule`.
fn scripted_trajectory(oracle: Oracle, schedule: StepSchedule, x1: f64, xi: &[f64]) -> Result<Trajectory> {
    let horizon = xi.len();
    let mut records = Vec::with_capacity(horizon);
    let mut x = x1;
    for (k, noise) in xi.iter().enumerate() {
        let t = k + 1;
        let eta = schedule.at(t);
        let g = x + noise;
        let next = x - eta * g;
        if !next.is_finite() {
            return Err(Error::Divergence { step: t });
        }
        records.push(StepRecord {
            t,
            x: RealVec::new(alloc::vec![x])?,
            g: RealVec::new(alloc::vec![g])?,
            grad: RealVec::new(alloc::vec![x])?,
            extra: StepExtra::Sgd { eta },
        });
        x = next;
    }
    Ok(Trajectory {
        meta: TrajectoryMeta {
            objective_id: oracle.objective().id().into(),
            oracle,
            optimizer: OptimizerSpec::Sgd { schedule },
            master_seed: 0,
            run_index: 0,
            horizon,
        },
        records,
        terminal: RealVec::new(alloc::vec![x])?,
        diverged_at: None,
    })
}

/// Noise-free run except for `ξ_j = σA`. Returns the trajectory and
/// `Σ_{t≤T} x_t²`.
pub fn shocked_trajectory(inst: &ConstStepInstance, j: usize, sigma: f64) -> Result<(Trajectory, f64)> {
    if j < 1 || j > inst.m {
        return Err(Error::OutOfRange(alloc::format!("shock index {j} not in 1..={}", inst.m)));
    }
    if sigma != 1.0 && sigma != -1.0 {
        return Err(config_err!("sigma must be +1 or -1, got {sigma}"));
    }
    let mut xi = alloc::vec![0.0; inst.horizon];
    xi[j - 1] = sigma * inst.amplitude;
    let tr = scripted_trajectory(
        half_square_oracle(inst.amplitude),
        StepSchedule::Constant(inst.gamma),
        inst.x_init,
        &xi,
    )?;
    let sum_sq = tr.records.iter().map(|r| r.x[0] * r.x[0]).sum();
    Ok((tr, sum_sq))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LbMetric {
    /// `(1/T) Σ_t |∇f(x_t)|²`.
    Avg,
    /// `Σ_t η_t |∇f(x_t)|²`.
    Weighted,
}

impl LbMetric {
    fn of(self, xs: &[f64], schedule: &StepSchedule) -> f64 {
        match self {
            LbMetric::Avg => xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64,
            LbMetric::Weighted => xs.iter().enumerate().map(|(k, x)| schedule.at(k + 1) * x * x).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub se: f64,
    pub n: u64,
    pub exceedances: u64,
}

impl McEstimate {
    pub fn from_counts(exceedances: u64, n: u64) -> Self {
        let est = exceedances as f64 / n as f64;
        Self { estimate: est, se: libm::sqrt(est * (1.0 - est) / n as f64), n, exceedances }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InstanceSummary {
    ConstStep(ConstStepInstance),
    TimeVarying(TvSummary),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    /// Exact event probability exceeds the target.
    pub prob_exceeds_target: bool,
    /// Worst shocked-trajectory metric meets the closed-form bound on the event.
    pub energy_meets_bound: bool,
    /// Worst shocked-trajectory metric meets the stated threshold.
    pub energy_meets_threshold: bool,
    /// Monte Carlo exceedance rate is at least the exact event probability
    /// minus four standard errors (the event implies an exceedance).
    pub mc_consistent: Option<bool>,
}

impl Verdicts {
    pub fn all(&self) -> bool {
        self.prob_exceeds_target
            && self.energy_meets_bound
            && self.energy_meets_threshold
            && self.mc_consistent != Some(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LBReport {
    pub instance: InstanceSummary,
    pub metric: LbMetric,
    pub corollary: bool,
    pub exact_event_prob: f64,
    pub prob_lower_bound_target: f64,
    pub metric_threshold: f64,
    /// Lower bound the event guarantees for the metric, in closed form.
    pub energy_bound: f64,
    /// Minimum of the metric over the shocked trajectories of the event.
    pub conditional_energy: f64,
    pub worst_shock_index: usize,
    pub worst_shock_sign: f64,
    pub mc: Option<McEstimate>,
    pub verdicts: Verdicts,
}

impl LBReport {
    /// Attaches a Monte Carlo exceedance estimate for the report's own
    /// metric and threshold.
    pub fn with_mc(mut self, mc: McEstimate) -> Self {
        self.verdicts.mc_consistent = Some(mc.estimate + 4.0 * mc.se >= self.exact_event_prob);
        self.mc = Some(mc);
        self
    }
}

/// `1/(512 δ √T log(1/δ))` or `1/(512 δ log²(1/δ))`.
pub fn const_threshold_value(delta: f64, horizon: usize, metric: LbMetric) -> f64 {
    let l = libm::log(1.0 / delta);
    match metric {
        LbMetric::Avg => 1.0 / (512.0 * delta * libm::sqrt(horizon as f64) * l),
        LbMetric::Weighted => 1.0 / (512.0 * delta * l * l),
    }
}

pub fn verify_const_instance(inst: &ConstStepInstance, metric: LbMetric) -> Result<LBReport> {
    let case = natural_case(inst);
    let exact = one_shock_prob_exact(inst, case)?;
    let schedule = StepSchedule::Constant(inst.gamma);
    let t = inst.horizon as f64;
    let a2 = inst.amplitude * inst.amplitude;
    let mut worst = (f64::INFINITY, 0, 0.0);
    for j in 1..=inst.m {
        let signs: &[f64] = match case {
            ShockCase::Signed => {
                let x_j = libm::pow(1.0 - inst.gamma, (j - 1) as f64) * inst.x_init;
                &[sign_choice((1.0 - inst.gamma) * x_j, inst.gamma * inst.amplitude)]
            }
            ShockCase::Unsigned => &[1.0, -1.0],
        };
        for &sigma in signs {
            let (tr, _) = shocked_trajectory(inst, j, sigma)?;
            let xs: Vec<f64> = tr.records.iter().map(|r| r.x[0]).collect();
            let value = metric.of(&xs, &schedule);
            if value < worst.0 {
                worst = (value, j, sigma);
            }
        }
    }
    let energy_bound = match (case, metric) {
        (ShockCase::Signed, LbMetric::Avg) => a2 * inst.response.unwrap_or(0.0) / t,
        (ShockCase::Signed, LbMetric::Weighted) => inst.gamma * a2 * inst.response.unwrap_or(0.0),
        (ShockCase::Unsigned, LbMetric::Avg) => a2 / (2.0 * t),
        (ShockCase::Unsigned, LbMetric::Weighted) => inst.gamma * a2 / 2.0,
    };
    let threshold = const_threshold_value(inst.delta, inst.horizon, metric);
    Ok(LBReport {
        instance: InstanceSummary::ConstStep(*inst),
        metric,
        corollary: false,
        exact_event_prob: exact,
        prob_lower_bound_target: inst.delta,
        metric_threshold: threshold,
        energy_bound,
        conditional_energy: worst.0,
        worst_shock_index: worst.1,
        worst_shock_sign: worst.2,
        mc: None,
        verdicts: Verdicts {
            prob_exceeds_target: exact > inst.delta,
            energy_meets_bound: worst.0 >= energy_bound * (1.0 - BOUND_ROUNDING),
            energy_meets_threshold: worst.0 >= threshold,
            mc_consistent: None,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvInstance {
    pub schedule: Vec<f64>,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub delta_bar: f64,
    #[serde(rename = "A")]
    pub amplitude: f64,
    pub p: f64,
    /// `|I_T| = ⌊T/2⌋`.
    pub shock_window: usize,
    #[serde(rename = "R_T")]
    pub r_t: f64,
    #[serde(rename = "Q_T")]
    pub q_t: f64,
}

/// Compact form of a [`TvInstance`] for reports (the schedule is omitted).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvSummary {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub delta_bar: f64,
    #[serde(rename = "A")]
    pub amplitude: f64,
    pub p: f64,
    pub shock_window: usize,
    #[serde(rename = "R_T")]
    pub r_t: f64,
    #[serde(rename = "Q_T")]
    pub q_t: f64,
}

/// `(R_T, Q_T)`: minima over `s ∈ {1..⌊T/2⌋}` of `η_s² Σ_{t>s} Π_{s,t}²` and
/// `η_s² Σ_{t>s} η_t Π_{s,t}²`, with `Π_{s,t} = Π_{r=s+1}^{t−1}(1 − η_r)`.
pub fn response_quantities(schedule: &[f64]) -> (f64, f64) {
    let horizon = schedule.len();
    let eta = |t: usize| schedule[t - 1];
    let (mut r_min, mut q_min) = (f64::INFINITY, f64::INFINITY);
    for s in 1..=horizon / 2 {
        let (mut pi, mut r_sum, mut q_sum) = (1.0, 0.0, 0.0);
        for t in s + 1..=horizon {
            r_sum += pi * pi;
            q_sum += eta(t) * pi * pi;
            pi *= 1.0 - eta(t);
        }
        let e2 = eta(s) * eta(s);
        r_min = r_min.min(e2 * r_sum);
        q_min = q_min.min(e2 * q_sum);
    }
    (r_min, q_min)
}

pub fn build_tv_instance(schedule: Vec<f64>, horizon: usize, delta_bar: f64) -> Result<TvInstance> {
    if schedule.len() != horizon {
        return Err(config_err!("schedule length {} does not match T = {horizon}", schedule.len()));
    }
    if let Some(k) = schedule.iter().position(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(config_err!("schedule entry {} is negative or non-finite", k + 1));
    }
    if horizon <= 10 {
        return Err(config_err!("time-varying instances require T > 10, got {horizon}"));
    }
    if !(delta_bar > 0.0 && delta_bar < 1.0) {
        return Err(config_err!("delta_bar must lie in (0,1), got {delta_bar}"));
    }
    let t = horizon as f64;
    let (r_t, q_t) = response_quantities(&schedule);
    Ok(TvInstance {
        schedule,
        horizon,
        delta_bar,
        amplitude: libm::sqrt(4.0 * t / delta_bar),
        p: delta_bar / (4.0 * t),
        shock_window: horizon / 2,
        r_t,
        q_t,
    })
}

impl TvInstance {
    pub fn summary(&self) -> TvSummary {
        TvSummary {
            horizon: self.horizon,
            delta_bar: self.delta_bar,
            amplitude: self.amplitude,
            p: self.p,
            shock_window: self.shock_window,
            r_t: self.r_t,
            q_t: self.q_t,
        }
    }

    /// `|I_T| p (1 − p)^{T−1}`.
    pub fn event_prob(&self) -> f64 {
        self.shock_window as f64 * self.p * libm::pow(1.0 - self.p, self.horizon as f64 - 1.0)
    }

    /// Run from `x_1 = 0` with the single shock `ξ_s = A`.
    pub fn shocked_trajectory(&self, s: usize) -> Result<Trajectory> {
        if s < 1 || s > self.shock_window {
            return Err(Error::OutOfRange(alloc::format!("shock index {s} not in 1..={}", self.shock_window)));
        }
        let mut xi = alloc::vec![0.0; self.horizon];
        xi[s - 1] = self.amplitude;
        scripted_trajectory(
            half_square_oracle(self.amplitude),
            StepSchedule::Explicit(self.schedule.clone()),
            0.0,
            &xi,
        )
    }
}

/// Checks the time-varying bounds. In corollary mode the target becomes
/// `δ = δ̄/16` and the thresholds are the small-confidence ones, after
/// checking their preconditions.
pub fn verify_tv_instance(inst: &TvInstance, metric: LbMetric, corollary: bool) -> Result<LBReport> {
    let t = inst.horizon as f64;
    let db = inst.delta_bar;
    let energy_bound = match metric {
        LbMetric::Avg => 4.0 / db * inst.r_t,
        LbMetric::Weighted => 4.0 * t / db * inst.q_t,
    };
    let (target, threshold) = if corollary {
        let delta = db / 16.0;
        let (resp, name, scale) = match metric {
            LbMetric::Avg => (inst.r_t, "R_T", 4.0 * libm::sqrt(t)),
            LbMetric::Weighted => (inst.q_t, "Q_T", 4.0 * t),
        };
        if !(resp > 0.0) {
            return Err(instance_err(alloc::format!("{name} > 0 violated: {name} = {resp}")));
        }
        let limit = libm::exp(-1.0 / (scale * resp)) / 16.0;
        if !(delta < limit) {
            return Err(instance_err(alloc::format!(
                "delta < exp(-1/({} {name}))/16 violated: delta = {delta}, limit = {limit}",
                if metric == LbMetric::Avg { "4 sqrt(T)" } else { "4 T" }
            )));
        }
        let l = libm::log(1.0 / delta);
        let thr = match metric {
            LbMetric::Avg => 1.0 / (32.0 * delta * libm::sqrt(t) * l),
            LbMetric::Weighted => 1.0 / (32.0 * delta * l),
        };
        (delta, thr)
    } else {
        (db / 16.0, energy_bound)
    };
    let schedule = StepSchedule::Explicit(inst.schedule.clone());
    let mut worst = (f64::INFINITY, 0);
    for s in 1..=inst.shock_window {
        let tr = inst.shocked_trajectory(s)?;
        let xs: Vec<f64> = tr.records.iter().map(|r| r.x[0]).collect();
        let value = metric.of(&xs, &schedule);
        if value < worst.0 {
            worst = (value, s);
        }
    }
    let exact = inst.event_prob();
    Ok(LBReport {
        instance: InstanceSummary::TimeVarying(inst.summary()),
        metric,
        corollary,
        exact_event_prob: exact,
        prob_lower_bound_target: target,
        metric_threshold: threshold,
        energy_bound,
        conditional_energy: worst.0,
        worst_shock_index: worst.1,
        worst_shock_sign: 1.0,
        mc: None,
        verdicts: Verdicts {
            prob_exceeds_target: exact > target,
            energy_meets_bound: worst.0 >= energy_bound * (1.0 - BOUND_ROUNDING),
            energy_meets_threshold: worst.0 >= threshold,
            mc_consistent: None,
        },
    })
}

/// SGD on `½x²`, normally with three-point noise of amplitude `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShockModel {
    pub oracle: Oracle,
    pub schedule: StepSchedule,
    pub x1: f64,
    pub horizon: usize,
}

impl ShockModel {
    pub fn new(noise: Noise, schedule: StepSchedule, x1: f64, horizon: usize) -> Result<Self> {
        schedule.validate(horizon)?;
        let oracle = Oracle::new(Objective::half_square(), noise)?;
        Ok(Self { oracle, schedule, x1, horizon })
    }

    pub fn from_const(inst: &ConstStepInstance) -> Self {
        Self::new(Noise::ThreePoint { amplitude: inst.amplitude }, StepSchedule::Constant(inst.gamma), inst.x_init, inst.horizon)
            .expect("validated instance")
    }

    pub fn from_tv(inst: &TvInstance) -> Self {
        Self::new(Noise::ThreePoint { amplitude: inst.amplitude }, StepSchedule::Explicit(inst.schedule.clone()), 0.0, inst.horizon)
            .expect("validated instance")
    }

    /// Metric of run `run` under stream `(master_seed, run, "noise")`.
    /// A diverged run counts as `+∞`.
    pub fn run_metric(&self, metric: LbMetric, master_seed: u64, run: u64) -> f64 {
        struct Acc {
            metric: LbMetric,
            sum: f64,
        }
        impl StepObserver for Acc {
            fn observe(&mut self, s: &StepView<'_>) {
                let x = s.grad[0];
                let eta = match s.kind {
                    StepKind::Sgd { eta } => eta,
                    StepKind::Adam { .. } => unreachable!("SGD model"),
                };
                self.sum += match self.metric {
                    LbMetric::Avg => x * x,
                    LbMetric::Weighted => eta * x * x,
                };
            }
        }
        let mut stream = RngStream::derive(master_seed, run, stage::NOISE);
        let mut acc = Acc { metric, sum: 0.0 };
        let spec = OptimizerSpec::Sgd { schedule: self.schedule.clone() };
        match drive(&spec, &self.oracle, &[self.x1], self.horizon, &mut stream, &mut acc) {
            Ok(()) => match metric {
                LbMetric::Avg => acc.sum / self.horizon as f64,
                LbMetric::Weighted => acc.sum,
            },
            Err(_) => f64::INFINITY,
        }
    }

    /// Number of runs in `runs` whose metric is `≥ threshold`.
    pub fn exceedances(&self, metric: LbMetric, threshold: f64, master_seed: u64, runs: Range<u64>) -> u64 {
        runs.filter(|&r| self.run_metric(metric, master_seed, r) >= threshold).count() as u64
    }
}

/// Binomial estimate of `P(metric ≥ threshold)` over `n` seeded runs.
pub fn mc_event_prob(model: &ShockModel, metric: LbMetric, threshold: f64, n: u64, master_seed: u64) -> Result<McEstimate> {
    if n < MIN_MC_RUNS {
        return Err(config_err!("Monte Carlo run count must be >= {MIN_MC_RUNS}, got {n}"));
    }
    Ok(McEstimate::from_counts(model.exceedances(metric, threshold, master_seed, 0..n), n))
}
