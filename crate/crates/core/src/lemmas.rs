//! Executable pathwise inequalities and identities for Adam trajectories,
//! and a resampling estimator for the descent decomposition.
//!
//! An inequality instance `lhs ≤ rhs` holds when
//! `rhs − lhs ≥ −1e−9·(1 + |lhs| + |rhs|)`. Identity checks compare
//! `|a − b|` against `1e−10` times the natural magnitude of the terms
//! involved, with no additional slack.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, precondition_err, Error, Result};
use crate::instrument::{calibration, delta_pair};
use crate::kernel::{norm_sq, RngStream};
use crate::optimizers::{d_beta1, max_eta, run_trajectory, AdamParams, OptimizerSpec, RunError, Trajectory};
use crate::problems::{Noise, Objective, Oracle};

pub const ROUNDING_SLACK: f64 = 1e-9;
pub const IDENTITY_TOL: f64 = 1e-10;
/// Multiple of the pooled standard error allowed by [`check_descent`].
pub const DESCENT_SE_MULTIPLE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CheckId {
    GradLb,
    LogEnergy,
    DeltaSum,
    MRecur,
    FbarCmp,
    VCmp,
    MBounds,
    IncBound,
    GenBeta,
    YIdent,
    VExpand,
    QvIdent,
    DeltaSign,
    Descent,
}

impl CheckId {
    /// Pathwise checks run on every calibrated suite trajectory.
    pub const CALIBRATED: [CheckId; 12] = [
        CheckId::GradLb,
        CheckId::LogEnergy,
        CheckId::DeltaSum,
        CheckId::MRecur,
        CheckId::FbarCmp,
        CheckId::VCmp,
        CheckId::MBounds,
        CheckId::IncBound,
        CheckId::DeltaSign,
        CheckId::YIdent,
        CheckId::VExpand,
        CheckId::QvIdent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckId::GradLb => "GRAD-LB",
            CheckId::LogEnergy => "LOG-ENERGY",
            CheckId::DeltaSum => "DELTA-SUM",
            CheckId::MRecur => "M-RECUR",
            CheckId::FbarCmp => "FBAR-CMP",
            CheckId::VCmp => "V-CMP",
            CheckId::MBounds => "M-BOUNDS",
            CheckId::IncBound => "INC-BOUND",
            CheckId::GenBeta => "GEN-BETA",
            CheckId::YIdent => "Y-IDENT",
            CheckId::VExpand => "V-EXPAND",
            CheckId::QvIdent => "QV-IDENT",
            CheckId::DeltaSign => "DELTA-SIGN",
            CheckId::Descent => "DESCENT",
        }
    }
}

impl fmt::Display for CheckId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            CheckId::GradLb,
            CheckId::LogEnergy,
            CheckId::DeltaSum,
            CheckId::MRecur,
            CheckId::FbarCmp,
            CheckId::VCmp,
            CheckId::MBounds,
            CheckId::IncBound,
            CheckId::GenBeta,
            CheckId::YIdent,
            CheckId::VExpand,
            CheckId::QvIdent,
            CheckId::DeltaSign,
            CheckId::Descent,
        ];
        all.into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| config_err!("unknown check id {s:?}"))
    }
}

impl Serialize for CheckId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for CheckId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Outcome of a check: the instance closest to failing, i.e. the one
/// minimizing `margin + slack`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_id: CheckId,
    pub holds: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    /// Tolerance granted to the reported instance.
    pub slack: f64,
    pub worst_t: usize,
    pub worst_i: Option<usize>,
    pub instances: usize,
}

struct Worst {
    id: CheckId,
    best: Option<(f64, f64, f64, f64, usize, Option<usize>)>,
    all_hold: bool,
    count: usize,
}

impl Worst {
    fn new(id: CheckId) -> Self {
        Self { id, best: None, all_hold: true, count: 0 }
    }

    /// `lhs ≤ rhs` up to rounding slack.
    fn le(&mut self, lhs: f64, rhs: f64, t: usize, i: Option<usize>) {
        let slack = ROUNDING_SLACK * (1.0 + lhs.abs() + rhs.abs());
        self.push(lhs, rhs, slack, t, i);
    }

    /// `a = b` to relative `IDENTITY_TOL` of `scale`.
    fn eq(&mut self, a: f64, b: f64, scale: f64, t: usize, i: Option<usize>) {
        self.push((a - b).abs(), IDENTITY_TOL * scale, 0.0, t, i);
    }

    fn push(&mut self, lhs: f64, rhs: f64, slack: f64, t: usize, i: Option<usize>) {
        self.count += 1;
        let margin = rhs - lhs;
        // A NaN margin fails and ranks as the worst instance.
        let ok = margin >= -slack;
        self.all_hold &= ok;
        let key = if margin.is_nan() { f64::NEG_INFINITY } else { margin + slack };
        if self.best.is_none_or(|b| key < b.0) {
            self.best = Some((key, lhs, rhs, slack, t, i));
        }
    }

    fn finish(self) -> CheckResult {
        let (_, lhs, rhs, slack, t, i) = self.best.unwrap_or((0.0, 0.0, 0.0, 0.0, 0, None));
        CheckResult {
            check_id: self.id,
            holds: self.all_hold,
            lhs,
            rhs,
            margin: rhs - lhs,
            slack,
            worst_t: t,
            worst_i: i,
            instances: self.count,
        }
    }
}

fn adam_of(traj: &Trajectory) -> Result<&AdamParams> {
    traj.adam_params().ok_or_else(|| precondition_err!("check requires an Adam trajectory"))
}

fn require_calibrated(traj: &Trajectory) -> Result<(f64, f64, f64)> {
    let (eta, t, eps) = calibration(traj)?;
    if t < 10.0 {
        return Err(precondition_err!("check requires T >= 10"));
    }
    Ok((eta, t, eps))
}

/// `y_t` for `1 ≤ t ≤ len + 1`.
pub(crate) fn y_at(traj: &Trajectory, t: usize, beta1: f64) -> Vec<f64> {
    if t == 1 {
        return traj.x(1).to_vec();
    }
    traj.x(t)
        .iter()
        .zip(traj.x(t - 1))
        .map(|(a, b)| (a - beta1 * b) / (1.0 - beta1))
        .collect()
}

fn fbar(traj: &Trajectory, x: &[f64]) -> f64 {
    let f = traj.oracle().objective();
    f.value_unchecked(x) - f.f_star() + 1.0
}

fn grad(traj: &Trajectory, x: &[f64]) -> Vec<f64> {
    let mut out = alloc::vec![0.0; x.len()];
    traj.oracle().objective().grad_into(x, &mut out);
    out
}

fn gm_sq(traj: &Trajectory, t: usize) -> f64 {
    if t == 0 {
        return 0.0;
    }
    traj.gamma(t).iter().zip(traj.m(t)).map(|(g, m)| (g * m) * (g * m)).sum()
}

fn gg_sq(traj: &Trajectory, t: usize) -> f64 {
    traj.gamma(t).iter().zip(traj.record(t).g.iter()).map(|(a, b)| (a * b) * (a * b)).sum()
}

pub fn run_pathwise_check(check_id: CheckId, traj: &Trajectory) -> Result<CheckResult> {
    if traj.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let n = traj.len();
    let d = traj.dim();
    let mut w = Worst::new(check_id);
    match check_id {
        CheckId::GradLb => {
            // ‖∇f‖² ≤ 2L(f − f*), which implies the f̄ form.
            let f = traj.oracle().objective();
            let l = f.smoothness();
            for t in 1..=n + 1 {
                let x = traj.x(t);
                w.le(norm_sq(&grad(traj, x)), 2.0 * l * (f.value_unchecked(x) - f.f_star()), t, None);
            }
        }
        CheckId::LogEnergy => {
            let (eta, horizon, _) = require_calibrated(traj)?;
            let p = adam_of(traj)?;
            let df = d as f64;
            let (mut asge, mut mome, mut s) = (0.0, 0.0, df * p.v0());
            for t in 1..=n {
                asge += gg_sq(traj, t);
                mome += gm_sq(traj, t);
                s += traj.record(t).g.norm_sq();
                let log = libm::log1p(s / (p.v0() * df * horizon));
                w.le(asge, 4.0 * eta * eta * df * log, t, None);
                w.le(mome, 16.0 * eta * eta * df * log, t, None);
            }
        }
        CheckId::DeltaSum => {
            let (eta, horizon, eps) = require_calibrated(traj)?;
            let v0 = adam_of(traj)?.v0();
            let mut total = 0.0;
            for t in 1..=n {
                for i in 0..d {
                    total += delta_pair(eta, horizon, eps, traj.v_or_init(t - 1, i), traj.v(t)[i]).0.abs();
                }
            }
            let df = d as f64;
            let bound = (8.0 * df * eps / libm::pow(v0, 1.5) + 8.0 * df / libm::sqrt(v0)) * eta;
            w.le(total, bound, n, None);
        }
        CheckId::MRecur => {
            let b1 = adam_of(traj)?.beta1();
            for t in 1..=n {
                for i in 0..d {
                    let (m, mp, g) = (traj.m(t)[i], traj.m_or_init(t - 1, i), traj.record(t).g[i]);
                    w.le(m * m - mp * mp, -(1.0 - b1) * mp * mp + (1.0 - b1) * g * g, t, Some(i));
                }
            }
        }
        CheckId::FbarCmp => {
            let b1 = adam_of(traj)?.beta1();
            let l = traj.oracle().objective().smoothness();
            let k = l * b1 * b1 / ((1.0 - b1) * (1.0 - b1));
            for t in 1..=n + 1 {
                let (fy, fx) = (fbar(traj, &y_at(traj, t, b1)), fbar(traj, traj.x(t)));
                let extra = k * gm_sq(traj, t - 1);
                w.le(fy, 2.0 * fx + extra, t, None);
                w.le(fx, 2.0 * fy + extra, t, None);
            }
        }
        CheckId::VCmp => {
            let p = adam_of(traj)?;
            if p.beta2() != 1.0 - 1.0 / p.horizon() as f64 || p.horizon() < 2 {
                return Err(precondition_err!("V-CMP requires beta2 = 1 - 1/T with T >= 2"));
            }
            for i in 0..d {
                let mut running = traj.v(1)[i];
                for h in 2..=n {
                    w.le(running, 4.0 * traj.v(h)[i], h, Some(i));
                    running = running.max(traj.v(h)[i]);
                }
            }
        }
        CheckId::MBounds => {
            let (b1, _) = (adam_of(traj)?.beta1(), require_calibrated(traj)?);
            let (mut a, mut b, mut sum_gm, mut sum_gg) = (0.0, 0.0, 0.0, 0.0);
            for t in 1..=n {
                a = b1 * a + traj.record(t).g.norm_sq();
                b = b1 * b + gg_sq(traj, t);
                w.le(norm_sq(traj.m(t)), (1.0 - b1) * a, t, None);
                w.le(gm_sq(traj, t), 4.0 * (1.0 - b1) * b, t, None);
                sum_gm += gm_sq(traj, t);
                sum_gg += gg_sq(traj, t);
                w.le(sum_gm, 4.0 * sum_gg, t, None);
            }
        }
        CheckId::IncBound => {
            let (eta, _, _) = require_calibrated(traj)?;
            let bound = libm::sqrt(d as f64) * eta * d_beta1(adam_of(traj)?.beta1())?;
            for t in 1..=n {
                let step = libm::sqrt(norm_sq(
                    &traj.x(t + 1).iter().zip(traj.x(t)).map(|(a, b)| a - b).collect::<Vec<_>>(),
                ));
                w.le(step, bound, t, None);
            }
        }
        CheckId::GenBeta => gen_beta(traj, &mut w)?,
        CheckId::YIdent => {
            let b1 = adam_of(traj)?.beta1();
            let k = b1 / (1.0 - b1);
            for t in 1..=n {
                let (y1, y0) = (y_at(traj, t + 1, b1), y_at(traj, t, b1));
                let g = &traj.record(t).g;
                for i in 0..d {
                    let gd = traj.gamma_or_init(t - 1, i) - traj.gamma(t)[i];
                    let a = -traj.gamma(t)[i] * g[i];
                    let c = k * gd * traj.m_or_init(t - 1, i);
                    let xs = traj.x(t + 1)[i].abs()
                        + traj.x(t)[i].abs()
                        + if t > 1 { traj.x(t - 1)[i].abs() } else { 0.0 };
                    let scale = xs / (1.0 - b1) + a.abs() + c.abs();
                    w.eq(y1[i] - y0[i], a + c, scale, t, Some(i));
                }
            }
        }
        CheckId::VExpand => {
            let p = adam_of(traj)?;
            let b2 = p.beta2();
            for i in 0..d {
                // Closed form Σ evaluated directly, not by the recursion.
                for t in 1..=n {
                    let mut sum = libm::pow(b2, t as f64) * p.v0();
                    let mut mag = sum;
                    for s in 1..=t {
                        let g = traj.record(s).g[i];
                        let term = (1.0 - b2) * libm::pow(b2, (t - s) as f64) * g * g;
                        sum += term;
                        mag += term;
                    }
                    w.eq(traj.v(t)[i], sum, mag, t, Some(i));
                }
            }
        }
        CheckId::QvIdent => {
            adam_of(traj)?;
            for t in 1..=n {
                let inc: f64 = traj.x(t + 1).iter().zip(traj.x(t)).map(|(a, b)| (a - b) * (a - b)).sum();
                let gm = gm_sq(traj, t);
                let scale = gm + libm::sqrt(gm) * libm::sqrt(norm_sq(traj.x(t)));
                w.eq(inc, gm, scale, t, None);
            }
        }
        CheckId::DeltaSign => {
            let (eta, horizon, eps) = require_calibrated(traj)?;
            for t in 1..=n {
                for i in 0..d {
                    let (g_prev, g_cur) = (traj.gamma_or_init(t - 1, i), traj.gamma(t)[i]);
                    let (d1, d2) = delta_pair(eta, horizon, eps, traj.v_or_init(t - 1, i), traj.v(t)[i]);
                    w.le(-d1, 0.0, t, Some(i));
                    w.le(d2, 0.0, t, Some(i));
                    w.eq(d1 + d2, g_prev - g_cur, d1.abs() + d2.abs() + g_prev + g_cur, t, Some(i));
                }
            }
        }
        CheckId::Descent => {
            return Err(config_err!("DESCENT is a resampled check; use check_descent"));
        }
    }
    Ok(w.finish())
}

/// Both chained self-normalization bounds for `β1 = 0`, or the `β2 = 0`
/// endpoint `Σ‖γ_t ⊙ g_t‖² ≤ γ²dT`.
fn gen_beta(traj: &Trajectory, w: &mut Worst) -> Result<()> {
    let p = adam_of(traj)?;
    if p.beta1() != 0.0 {
        return Err(precondition_err!("GEN-BETA requires beta1 = 0"));
    }
    let (n, d) = (traj.len(), traj.dim());
    let (gamma, b2, v0) = (p.gamma(), p.beta2(), p.v0());
    let lhs: f64 = (1..=n).map(|t| gg_sq(traj, t)).sum();
    let nf = n as f64;
    if b2 == 0.0 {
        w.le(lhs, gamma * gamma * d as f64 * nf, n, None);
        return Ok(());
    }
    let c = (1.0 - b2) / v0;
    let k = gamma * gamma / (1.0 - b2);
    // log(1 + c Σ_t β2^{−t} g²) = n·log(1/β2) + log(β2^n + c Σ_t β2^{n−t} g²).
    let log_inv = -libm::log(b2);
    let mut middle = 0.0;
    for i in 0..d {
        let mut acc = 0.0;
        for t in 1..=n {
            let g = traj.record(t).g[i];
            acc = b2 * acc + g * g;
        }
        middle += nf * log_inv + libm::log(libm::pow(b2, nf) + c * acc);
    }
    middle *= k;
    let total: f64 = (1..=n).map(|t| traj.record(t).g.norm_sq()).sum();
    let df = d as f64;
    let right = k * df * nf * log_inv + k * df * libm::log1p(c / df * total);
    w.le(lhs, middle, n, None);
    w.le(middle, right, n, None);
    Ok(())
}

/// Functionals of a resampled gradient `g'` drawn at step `t` with the
/// history `(x_t, m_{t−1}, v_{t−1})` held fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quantity {
    /// Coordinate `i` of `g'`.
    GradientCoord(usize),
    /// `Σ_i γ'_i ∇f(x_t)_i g'_i`.
    GammaGradG,
    /// `|Δ'_{t,1,i}|`.
    AbsDelta1(usize),
    /// `Σ_i ∇f(x_t)_i² |Δ'_{t,1,i}|`.
    GradWeightedAbsDelta1,
    /// `Σ_i |Δ'_{t,1,i}|`.
    SumAbsDelta1,
    /// `Σ_i (γ_{t−1,i} − γ'_i) ∇f(y_t)_i m_{t−1,i}`.
    GammaDiffMomentum,
}

struct Resampler<'a> {
    traj: &'a Trajectory,
    t: usize,
    params: AdamParams,
    calib: Option<(f64, f64)>,
    grad_x: Vec<f64>,
    grad_y: Vec<f64>,
    g: Vec<f64>,
    gamma: Vec<f64>,
    delta1: Vec<f64>,
}

impl<'a> Resampler<'a> {
    fn new(traj: &'a Trajectory, t: usize) -> Result<Self> {
        let params = *adam_of(traj)?;
        if t < 1 || t > traj.len() {
            return Err(Error::OutOfRange(alloc::format!("step {t} not in 1..={}", traj.len())));
        }
        let calib = params.eta().map(|eta| (eta, params.horizon() as f64));
        let d = traj.dim();
        Ok(Self {
            traj,
            t,
            params,
            calib,
            grad_x: grad(traj, traj.x(t)),
            grad_y: grad(traj, &y_at(traj, t, params.beta1())),
            g: alloc::vec![0.0; d],
            gamma: alloc::vec![0.0; d],
            delta1: alloc::vec![0.0; d],
        })
    }

    fn draw(&mut self, stream: &mut RngStream) {
        let (t, p) = (self.t, &self.params);
        self.g.copy_from_slice(&self.grad_x);
        self.traj.oracle().add_noise(stream, &mut self.g);
        for i in 0..self.g.len() {
            let v_prev = self.traj.v_or_init(t - 1, i);
            let v = p.beta2() * v_prev + (1.0 - p.beta2()) * self.g[i] * self.g[i];
            self.gamma[i] = p.gamma() / (libm::sqrt(v) + p.eps());
            self.delta1[i] = match self.calib {
                Some((eta, horizon)) => delta_pair(eta, horizon, p.eps(), v_prev, v).0,
                None => f64::NAN,
            };
        }
    }

    fn eval(&self, q: Quantity) -> f64 {
        let d = self.g.len();
        match q {
            Quantity::GradientCoord(i) => self.g[i],
            Quantity::GammaGradG => (0..d).map(|i| self.gamma[i] * self.grad_x[i] * self.g[i]).sum(),
            Quantity::AbsDelta1(i) => self.delta1[i].abs(),
            Quantity::GradWeightedAbsDelta1 => {
                (0..d).map(|i| self.grad_x[i] * self.grad_x[i] * self.delta1[i].abs()).sum()
            }
            Quantity::SumAbsDelta1 => self.delta1.iter().map(|v| v.abs()).sum(),
            Quantity::GammaDiffMomentum => (0..d)
                .map(|i| {
                    (self.traj.gamma_or_init(self.t - 1, i) - self.gamma[i])
                        * self.grad_y[i]
                        * self.traj.m_or_init(self.t - 1, i)
                })
                .sum(),
        }
    }

    fn validate(&self, q: Quantity) -> Result<()> {
        let d = self.g.len();
        match q {
            Quantity::GradientCoord(i) | Quantity::AbsDelta1(i) if i >= d => {
                Err(Error::OutOfRange(alloc::format!("coordinate {i} not below d = {d}")))
            }
            Quantity::AbsDelta1(_) | Quantity::GradWeightedAbsDelta1 | Quantity::SumAbsDelta1
                if self.calib.is_none() =>
            {
                Err(precondition_err!("Δ quantities require calibrated Adam parameters"))
            }
            _ => Ok(()),
        }
    }
}

/// Running mean and variance (Welford). An all-equal sample has SE exactly 0.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    first: f64,
    all_equal: bool,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        if self.n == 0 {
            self.first = x;
            self.all_equal = true;
        } else {
            self.all_equal &= x == self.first;
        }
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn mean_se(&self) -> (f64, f64) {
        if self.all_equal {
            return (self.first, 0.0);
        }
        let var = self.m2 / (self.n - 1) as f64;
        (self.mean, libm::sqrt(var / self.n as f64))
    }
}

/// Sample mean and standard error of `quantity` over `n` fresh draws of
/// `g_t` at fixed history.
pub fn mc_conditional_mean(
    traj: &Trajectory,
    t: usize,
    quantity: Quantity,
    n: usize,
    stream: &mut RngStream,
) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(config_err!("resample count must be >= 2, got {n}"));
    }
    let mut r = Resampler::new(traj, t)?;
    r.validate(quantity)?;
    let mut mom = Moments::default();
    for _ in 0..n {
        r.draw(stream);
        mom.push(r.eval(quantity));
    }
    Ok(mom.mean_se())
}

/// A martingale component: its realized value under the estimated
/// conditional expectation, and an independent estimate of its own
/// conditional mean (which is zero in exact arithmetic).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTerm {
    pub value: f64,
    pub cond_mean: f64,
    pub cond_mean_se: f64,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentTerms {
    pub t: usize,
    pub lhs: f64,
    pub descent: f64,
    pub D1: MartingaleTerm,
    pub D2: MartingaleTerm,
    pub D3: MartingaleTerm,
    pub P: f64,
    /// Standard error of the combined estimated part of the right side.
    pub pooled_se: f64,
    pub resample_n: usize,
}

impl DescentTerms {
    pub fn rhs(&self) -> f64 {
        self.descent + self.D1.value + self.D2.value + self.D3.value + self.P
    }
}

const DESCENT_QUANTITIES: [Quantity; 3] =
    [Quantity::GammaGradG, Quantity::GradWeightedAbsDelta1, Quantity::GammaDiffMomentum];

/// Evaluates every term of the one-step descent inequality at step `t`.
///
/// Two independent batches of `n` resamples are drawn from `stream`. The
/// first supplies the conditional expectations inside `D_t` and `P_t`. The
/// second re-estimates the same expectations so each `D_{t,j}` gets an
/// estimate of its conditional mean that is independent of its value.
pub fn descent_terms(traj: &Trajectory, t: usize, n: usize, stream: &mut RngStream) -> Result<DescentTerms> {
    if n < 2 {
        return Err(config_err!("resample count must be >= 2, got {n}"));
    }
    let (eta, horizon, eps) = require_calibrated(traj)?;
    let p = *adam_of(traj)?;
    if t < 1 || t + 1 > horizon as usize || t > traj.len() {
        return Err(Error::OutOfRange(alloc::format!(
            "descent step {t} not in 1..={}",
            (horizon as usize - 1).min(traj.len())
        )));
    }
    let d = traj.dim();
    let b1 = p.beta1();
    let k1 = b1 / (1.0 - b1);
    let f = traj.oracle().objective();
    let l = f.smoothness();
    let c_var = traj.oracle().variance_bound();
    let v = p.v0();

    let mut r = Resampler::new(traj, t)?;
    let mut batch = |stream: &mut RngStream| {
        let mut moms = [Moments::default(); 3];
        let mut sum_abs = Moments::default();
        let mut combined = Moments::default();
        for _ in 0..n {
            r.draw(stream);
            let vals = DESCENT_QUANTITIES.map(|q| r.eval(q));
            for (m, x) in moms.iter_mut().zip(vals) {
                m.push(x);
            }
            let s = r.eval(Quantity::SumAbsDelta1);
            sum_abs.push(s);
            combined.push(vals[0] + vals[1] + c_var * s - k1 * vals[2]);
        }
        (moms.map(|m| m.mean_se()), sum_abs.mean_se().0, combined.mean_se().1)
    };
    let (est_a, sum_abs_a, pooled_se) = batch(stream);
    let (est_b, _, _) = batch(stream);

    // Realized values at step t.
    let grad_x = grad(traj, traj.x(t));
    let y_t = y_at(traj, t, b1);
    let grad_y = grad(traj, &y_t);
    let g = &traj.record(t).g;
    let gamma = traj.gamma(t);
    let real_ggg: f64 = (0..d).map(|i| gamma[i] * grad_x[i] * g[i]).sum();
    let real_wd: f64 = (0..d)
        .map(|i| {
            let d1 = delta_pair(eta, horizon, eps, traj.v_or_init(t - 1, i), traj.v(t)[i]).0;
            grad_x[i] * grad_x[i] * d1.abs()
        })
        .sum();
    let real_gdm: f64 = (0..d)
        .map(|i| (traj.gamma_or_init(t - 1, i) - gamma[i]) * grad_y[i] * traj.m_or_init(t - 1, i))
        .sum();

    let term = |value: f64, a: (f64, f64), b: (f64, f64), sign: f64| MartingaleTerm {
        value,
        cond_mean: sign * (a.0 - b.0),
        cond_mean_se: libm::sqrt(a.1 * a.1 + b.1 * b.1),
    };
    let d1 = term(est_a[0].0 - real_ggg, est_a[0], est_b[0], 1.0);
    let d2 = term(est_a[1].0 - real_wd, est_a[1], est_b[1], 1.0);
    // D3 is realized minus expected; its prefactor vanishes when β1 = 0.
    let d3 = if b1 == 0.0 {
        MartingaleTerm { value: 0.0, cond_mean: 0.0, cond_mean_se: 0.0 }
    } else {
        let m = term(k1 * (real_gdm - est_a[2].0), est_a[2], est_b[2], -k1);
        MartingaleTerm { cond_mean_se: k1 * m.cond_mean_se, ..m }
    };

    // Potential difference.
    let y_next = y_at(traj, t + 1, b1);
    let grad_next = grad(traj, traj.x(t + 1));
    let pot = |y: &[f64], gamma_of: &dyn Fn(usize) -> f64, gr: &[f64]| {
        f.value_unchecked(y) + (0..d).map(|i| gamma_of(i) * gr[i] * gr[i]).sum::<f64>()
    };
    let lhs = pot(&y_next, &|i| gamma[i], &grad_next) - pot(&y_t, &|i| traj.gamma_or_init(t - 1, i), &grad_x);
    let weighted_prev: f64 = (0..d).map(|i| traj.gamma_or_init(t - 1, i) * grad_x[i] * grad_x[i]).sum();
    let descent = -weighted_prev / 8.0;

    // Residual, term by term.
    let om = 1.0 - b1;
    let gm_prev = gm_sq(traj, t - 1);
    let p1 = (b1 * b1 * l / (2.0 * om * om) + b1 * b1 * l * l * eta / (4.0 * om * om * libm::sqrt(v))) * gm_prev;
    let p2 = 1.5 * l * gg_sq(traj, t);
    let p3 = b1 * b1 * l / (om * om)
        * (0..d)
            .map(|i| {
                let gd = traj.gamma_or_init(t - 1, i) - gamma[i];
                let m = traj.m_or_init(t - 1, i);
                gd * gd * m * m
            })
            .sum::<f64>();
    let p4 = 140.0 * d as f64 * l * l * eta / libm::sqrt(v) * gm_sq(traj, t);
    let p5 = c_var * sum_abs_a;
    let tail = libm::sqrt(c_var) + eps / (libm::sqrt(horizon) + libm::sqrt(horizon - 1.0));
    let p6 = 8.0 * b1 * (1.0 + b1) / (om * om) * horizon / (horizon - 1.0)
        * (0..d)
            .map(|i| {
                let gp = traj.gamma_or_init(t - 1, i);
                let m = traj.m_or_init(t - 1, i);
                (grad_x[i].abs() + tail) / eta * gp * gp * m * m
            })
            .sum::<f64>();
    let p7 = k1 / horizon
        * (0..d)
            .map(|i| traj.gamma_or_init(t - 1, i) * (grad_y[i] * traj.m_or_init(t - 1, i)).abs())
            .sum::<f64>();

    Ok(DescentTerms {
        t,
        lhs,
        descent,
        D1: d1,
        D2: d2,
        D3: d3,
        P: p1 + p2 + p3 + p4 + p5 + p6 + p7,
        pooled_se,
        resample_n: n,
    })
}

/// `lhs ≤ descent + D + P`, allowing `5·pooled_se` plus rounding slack.
pub fn check_descent(traj: &Trajectory, t: usize, n: usize, stream: &mut RngStream) -> Result<CheckResult> {
    let terms = descent_terms(traj, t, n, stream)?;
    let (lhs, rhs) = (terms.lhs, terms.rhs());
    let slack = DESCENT_SE_MULTIPLE * terms.pooled_se + ROUNDING_SLACK * (1.0 + lhs.abs() + rhs.abs());
    let mut w = Worst::new(CheckId::Descent);
    w.push(lhs, rhs, slack, t, None);
    Ok(w.finish())
}

/// A randomly drawn configuration for the lemma suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCase {
    pub seed: u64,
    pub index: u64,
    pub oracle: Oracle,
    pub params: AdamParams,
    pub x1: Vec<f64>,
}

impl SuiteCase {
    pub fn d(&self) -> usize {
        self.oracle.dim()
    }

    pub fn horizon(&self) -> usize {
        self.params.horizon()
    }

    pub fn run(&self) -> core::result::Result<Trajectory, RunError> {
        let mut s = RngStream::derive(self.seed, self.index, crate::kernel::stage::NOISE);
        run_trajectory(&OptimizerSpec::Adam(self.params), &self.oracle, &self.x1, self.horizon(), &mut s)
    }
}

fn pick<T: Copy>(s: &mut RngStream, options: &[T]) -> T {
    options[(s.uniform01() * options.len() as f64) as usize % options.len()]
}

fn random_problem(s: &mut RngStream, d: usize) -> Objective {
    if s.uniform01() < 0.5 {
        let lambda = (0..d).map(|_| 0.25 + 2.75 * s.uniform01()).collect();
        Objective::quadratic_diag(lambda).expect("positive eigenvalues")
    } else {
        Objective::quadratic_cosine(d).expect("positive dimension")
    }
}

/// Calibrated Adam configuration number `index` of the randomized suite:
/// `d ∈ [1,8]`, `T ∈ [10,200]`, `β1 ∈ {0, 0.5, 0.9}`, `η ∈ (0, max_eta]`,
/// gaussian `σ ∈ {0, 0.5, 2}` or three-point `A ∈ {2, 10}` noise.
pub fn calibrated_case(seed: u64, index: u64) -> SuiteCase {
    let mut s = RngStream::derive(seed, index, crate::kernel::stage::INIT);
    let noise = pick(
        &mut s,
        &[
            Noise::Gaussian { sigma: 0.0 },
            Noise::Gaussian { sigma: 0.5 },
            Noise::Gaussian { sigma: 2.0 },
            Noise::ThreePoint { amplitude: 2.0 },
            Noise::ThreePoint { amplitude: 10.0 },
        ],
    );
    let d = match noise {
        Noise::ThreePoint { .. } => 1,
        _ => 1 + (s.uniform01() * 8.0) as usize,
    };
    let horizon = 10 + (s.uniform01() * 191.0) as usize;
    let beta1 = pick(&mut s, &[0.0, 0.5, 0.9]);
    let objective = random_problem(&mut s, d);
    let v0 = pick(&mut s, &[0.5, 1.0, 2.0]);
    let eps = pick(&mut s, &[1e-8, 1e-3, 0.1]);
    let cap = max_eta(d, v0, eps, beta1, objective.smoothness()).expect("valid max_eta inputs");
    let eta = cap * (1.0 - s.uniform01());
    let x1 = (0..d).map(|_| 3.0 * s.std_gaussian()).collect();
    SuiteCase {
        seed,
        index,
        oracle: Oracle::new(objective, noise).expect("valid oracle"),
        params: AdamParams::calibrate(eta, horizon, beta1, eps, v0).expect("valid calibration"),
        x1,
    }
}

/// `β1 = 0` configuration number `index` for the fixed-`β2` bounds, cycling
/// `β2` through `{0, 0.1, 0.5, 0.9, 0.99}` with an arbitrary `γ > 0`.
pub fn gen_beta_case(seed: u64, index: u64) -> SuiteCase {
    let mut s = RngStream::derive(seed, index, "gen-beta");
    let beta2 = [0.0, 0.1, 0.5, 0.9, 0.99][(index % 5) as usize];
    let noise = pick(
        &mut s,
        &[Noise::Gaussian { sigma: 0.5 }, Noise::Gaussian { sigma: 2.0 }, Noise::ThreePoint { amplitude: 3.0 }],
    );
    let d = match noise {
        Noise::ThreePoint { .. } => 1,
        _ => 1 + (s.uniform01() * 8.0) as usize,
    };
    let horizon = 1 + (s.uniform01() * 200.0) as usize;
    let objective = random_problem(&mut s, d);
    let gamma = libm::exp(libm::log(1e-3) + s.uniform01() * libm::log(1e3));
    let v0 = pick(&mut s, &[0.1, 1.0, 4.0]);
    let x1 = (0..d).map(|_| 2.0 * s.std_gaussian()).collect();
    SuiteCase {
        seed,
        index,
        oracle: Oracle::new(objective, noise).expect("valid oracle"),
        params: AdamParams::new(gamma, 0.0, beta2, 1e-8, v0, horizon).expect("valid parameters"),
        x1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::stage;

    fn zero_gradient_run(horizon: usize, beta1: f64) -> Trajectory {
        let oracle = Oracle::new(Objective::quadratic_cosine(1).unwrap(), Noise::Zero).unwrap();
        let p = AdamParams::calibrate(0.1, horizon, beta1, 1e-8, 1.0).unwrap();
        let mut s = RngStream::derive(0, 0, stage::NOISE);
        run_trajectory(&OptimizerSpec::Adam(p), &oracle, &[0.0], horizon, &mut s).unwrap()
    }

    #[test]
    fn check_ids_round_trip() {
        for c in CheckId::CALIBRATED.iter().chain(&[CheckId::GenBeta, CheckId::Descent]) {
            assert_eq!(c.as_str().parse::<CheckId>().unwrap(), *c);
        }
        assert!("NOPE".parse::<CheckId>().is_err());
    }

    #[test]
    fn v_cmp_zero_gradient_ratio() {
        let tr = zero_gradient_run(10, 0.0);
        let r = run_pathwise_check(CheckId::VCmp, &tr).unwrap();
        assert!(r.holds && r.margin > 0.0);
        // Worst pair is k = 1, h = 10: ratio 0.9^{-9}.
        assert_eq!((r.worst_t, r.worst_i), (10, Some(0)));
        assert!((r.lhs / (r.rhs / 4.0) - libm::pow(0.9, -9.0)).abs() < 1e-12);
    }

    #[test]
    fn m_recur_degenerate_equality() {
        let tr = zero_gradient_run(12, 0.5);
        let r = run_pathwise_check(CheckId::MRecur, &tr).unwrap();
        assert!(r.holds);
        assert_eq!(r.margin, 0.0);
    }

    #[test]
    fn log_energy_single_step() {
        let oracle = Oracle::new(Objective::half_square(), Noise::Zero).unwrap();
        let p = AdamParams::calibrate(1.0, 10, 0.0, 1e-300, 1.0).unwrap();
        let mut s = RngStream::derive(0, 0, stage::NOISE);
        let tr = run_trajectory(&OptimizerSpec::Adam(p), &oracle, &[1.0], 1, &mut s).unwrap();
        let r = run_pathwise_check(CheckId::LogEnergy, &tr).unwrap();
        assert!(r.holds);
        assert!((r.lhs - 0.1).abs() < 1e-15);
        assert!((r.rhs - 4.0 * libm::log(1.2)).abs() < 1e-12);
    }

    #[test]
    fn calibrated_checks_reject_uncalibrated() {
        let oracle = Oracle::new(Objective::half_square(), Noise::Zero).unwrap();
        let p = AdamParams::new(0.1, 0.0, 0.5, 1e-8, 1.0, 10).unwrap();
        let mut s = RngStream::derive(0, 0, stage::NOISE);
        let tr = run_trajectory(&OptimizerSpec::Adam(p), &oracle, &[1.0], 10, &mut s).unwrap();
        assert!(matches!(run_pathwise_check(CheckId::DeltaSum, &tr), Err(Error::Precondition(_))));
        assert!(run_pathwise_check(CheckId::GenBeta, &tr).unwrap().holds);
    }

    #[test]
    fn zero_noise_resampling_is_degenerate() {
        let oracle = Oracle::new(Objective::quadratic_cosine(2).unwrap(), Noise::Zero).unwrap();
        let p = AdamParams::calibrate(0.05, 20, 0.5, 1e-8, 1.0).unwrap();
        let mut s = RngStream::derive(0, 0, stage::NOISE);
        let tr = run_trajectory(&OptimizerSpec::Adam(p), &oracle, &[1.0, -0.5], 20, &mut s).unwrap();
        let mut rs = RngStream::derive(0, 0, stage::RESAMPLE);
        let (mean, se) = mc_conditional_mean(&tr, 3, Quantity::GradientCoord(0), 16, &mut rs).unwrap();
        assert_eq!(se, 0.0);
        assert_eq!(mean, tr.record(3).grad[0]);
        let terms = descent_terms(&tr, 3, 16, &mut rs).unwrap();
        for dj in [terms.D1, terms.D2, terms.D3] {
            assert_eq!(dj.value, 0.0);
            assert_eq!(dj.cond_mean_se, 0.0);
        }
        assert!(check_descent(&tr, 3, 16, &mut rs).unwrap().holds);
        assert!(mc_conditional_mean(&tr, 3, Quantity::GammaGradG, 1, &mut rs).is_err());
    }
}
