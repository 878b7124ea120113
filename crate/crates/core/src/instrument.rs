//! Trajectory functionals: energies, quadratic variation, the `S_t` path,
//! the momentum-removed sequence, step-size difference splits and the
//! first-passage time of the shifted objective.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{precondition_err, Error, Result};
use crate::kernel::RealVec;
use crate::optimizers::{StepExtra, Trajectory};

/// Cumulative functionals of one trajectory.
///
/// `E`, `ASGE` and `MomE` are defined for Adam runs only and `w_gsq` for SGD
/// runs only; the inapplicable ones are `None`. Prefix vectors have one entry
/// per recorded step, with entry `k` covering steps `1..=k+1`. `S` has one
/// more entry than the prefixes since it starts at `S_0 = d·v0`.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub T: usize,
    pub E: Option<f64>,
    pub ASGE: Option<f64>,
    pub MomE: Option<f64>,
    pub QV: f64,
    pub S: Vec<f64>,
    pub avg_gsq: f64,
    pub w_gsq: Option<f64>,
    pub E_prefix: Option<Vec<f64>>,
    pub ASGE_prefix: Option<Vec<f64>>,
    pub MomE_prefix: Option<Vec<f64>>,
    pub QV_prefix: Vec<f64>,
    pub gsq_prefix: Vec<f64>,
    pub w_gsq_prefix: Option<Vec<f64>>,
    /// Step at which the run diverged, if it did; all sums stop before it.
    pub diverged_at: Option<usize>,
}

fn prefix(iter: impl Iterator<Item = f64>) -> Vec<f64> {
    iter.scan(0.0, |acc, v| {
        *acc += v;
        Some(*acc)
    })
    .collect()
}

pub fn compute_ledger(traj: &Trajectory) -> Result<Ledger> {
    if traj.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let n = traj.len();
    let d = traj.dim();
    let adam = traj.adam_params().copied();

    let qv_prefix = prefix((1..=n).map(|t| {
        traj.x(t + 1).iter().zip(traj.x(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }));
    let gsq_prefix = prefix(traj.records.iter().map(|r| r.grad.norm_sq()));
    // S_0 uses v0 for Adam; SGD has no v0, so it starts at 0.
    let s0 = adam.map_or(0.0, |p| d as f64 * p.v0());
    let mut s = Vec::with_capacity(n + 1);
    s.push(s0);
    s.extend(prefix(traj.records.iter().map(|r| r.g.norm_sq())).into_iter().map(|v| s0 + v));

    let (mut e_prefix, mut asge_prefix, mut mome_prefix, mut w_prefix) = (None, None, None, None);
    if adam.is_some() {
        let weighted = |f: fn(f64, f64, f64, f64) -> f64| {
            prefix(traj.records.iter().map(move |r| match &r.extra {
                StepExtra::Adam { m, gamma, .. } => (0..d)
                    .map(|i| f(gamma[i], r.grad[i], r.g[i], m[i]))
                    .sum::<f64>(),
                StepExtra::Sgd { .. } => unreachable!("mixed trajectory"),
            }))
        };
        e_prefix = Some(weighted(|gm, gr, _, _| gm * gr * gr));
        asge_prefix = Some(weighted(|gm, _, g, _| gm * gm * g * g));
        mome_prefix = Some(weighted(|gm, _, _, m| (gm * m) * (gm * m)));
    } else {
        w_prefix = Some(prefix(
            traj.records
                .iter()
                .map(|r| traj.eta_at(r.t).unwrap_or(0.0) * r.grad.norm_sq()),
        ));
    }
    let last = |v: &Option<Vec<f64>>| v.as_ref().map(|p| p[n - 1]);
    Ok(Ledger {
        T: n,
        E: last(&e_prefix),
        ASGE: last(&asge_prefix),
        MomE: last(&mome_prefix),
        QV: qv_prefix[n - 1],
        S: s,
        avg_gsq: gsq_prefix[n - 1] / n as f64,
        w_gsq: last(&w_prefix),
        E_prefix: e_prefix,
        ASGE_prefix: asge_prefix,
        MomE_prefix: mome_prefix,
        QV_prefix: qv_prefix,
        gsq_prefix,
        w_gsq_prefix: w_prefix,
        diverged_at: traj.diverged_at,
    })
}

/// `y_1 = x_1`, `y_t = (x_t − β1 x_{t−1})/(1 − β1)`. Returns `y_1..y_{n+1}`
/// for a trajectory with `n` steps (the last entry uses the terminal iterate).
pub fn momentum_removed(traj: &Trajectory, beta1: f64) -> Result<Vec<RealVec>> {
    let params = traj
        .adam_params()
        .ok_or_else(|| precondition_err!("momentum removal needs an Adam trajectory"))?;
    if params.beta1() != beta1 {
        return Err(precondition_err!(
            "beta1 {beta1} does not match the trajectory's beta1 {}",
            params.beta1()
        ));
    }
    let n = traj.len();
    let mut out = Vec::with_capacity(n + 1);
    out.push(RealVec::new(traj.x(1).to_vec())?);
    for t in 2..=n + 1 {
        let y: Vec<f64> = traj
            .x(t)
            .iter()
            .zip(traj.x(t - 1))
            .map(|(xt, xp)| (xt - beta1 * xp) / (1.0 - beta1))
            .collect();
        out.push(RealVec::new(y)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaSplit {
    pub t: usize,
    pub i: usize,
    pub delta1: f64,
    pub delta2: f64,
}

/// Calibrated-run quantities needed by the split: `(η, T, ε)`.
pub(crate) fn calibration(traj: &Trajectory) -> Result<(f64, f64, f64)> {
    let p = traj
        .adam_params()
        .ok_or_else(|| precondition_err!("requires an Adam trajectory"))?;
    let eta = p
        .eta()
        .ok_or_else(|| precondition_err!("requires calibrated Adam parameters"))?;
    Ok((eta, p.horizon() as f64, p.eps()))
}

/// `Δ_{t,1,i}` and `Δ_{t,2,i}` from `v_{t−1,i}` and `v_{t,i}`.
#[inline]
pub(crate) fn delta_pair(eta: f64, horizon: f64, eps: f64, v_prev: f64, v_cur: f64) -> (f64, f64) {
    let (st, stm1) = (libm::sqrt(horizon), libm::sqrt(horizon - 1.0));
    let inv_prev = 1.0 / (libm::sqrt(v_prev) + eps);
    let inv_cur = 1.0 / (libm::sqrt(v_cur) + eps);
    let delta1 = eta / stm1 * inv_prev - eta / st * inv_cur;
    let delta2 = eta * (1.0 / st - 1.0 / stm1) * inv_prev;
    (delta1, delta2)
}

pub fn delta_split(traj: &Trajectory, t: usize, i: usize) -> Result<DeltaSplit> {
    let (eta, horizon, eps) = calibration(traj)?;
    if t < 1 || t > traj.len() {
        return Err(Error::OutOfRange(alloc::format!("step {t} not in 1..={}", traj.len())));
    }
    if i >= traj.dim() {
        return Err(Error::OutOfRange(alloc::format!("coordinate {i} not below d = {}", traj.dim())));
    }
    let (delta1, delta2) = delta_pair(eta, horizon, eps, traj.v_or_init(t - 1, i), traj.v(t)[i]);
    Ok(DeltaSplit { t, i, delta1, delta2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingTime {
    Hit(usize),
    NotHit,
}

/// First `t` with `f̄(x_t) ≥ G` among the recorded iterates.
pub fn stopping_time(traj: &Trajectory, g_level: f64) -> Result<StoppingTime> {
    if !(g_level >= 1.0) {
        return Err(precondition_err!("threshold G must be >= 1, got {g_level}"));
    }
    let f = traj.oracle().objective();
    for r in &traj.records {
        if f.value_unchecked(&r.x) - f.f_star() + 1.0 >= g_level {
            return Ok(StoppingTime::Hit(r.t));
        }
    }
    Ok(StoppingTime::NotHit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{stage, RngStream};
    use crate::optimizers::{run_trajectory, AdamParams, OptimizerSpec};
    use crate::problems::{Noise, Objective, Oracle};

    fn at_minimizer(beta1: f64) -> Trajectory {
        let oracle = Oracle::new(Objective::quadratic_cosine(2).unwrap(), Noise::Zero).unwrap();
        let p = AdamParams::calibrate(0.1, 20, beta1, 1e-8, 1.0).unwrap();
        let mut s = RngStream::derive(1, 0, stage::NOISE);
        run_trajectory(&OptimizerSpec::Adam(p), &oracle, &[0.0, 0.0], 20, &mut s).unwrap()
    }

    #[test]
    fn minimizer_ledger_is_zero() {
        let tr = at_minimizer(0.0);
        let l = compute_ledger(&tr).unwrap();
        assert_eq!((l.E, l.ASGE, l.MomE), (Some(0.0), Some(0.0), Some(0.0)));
        assert_eq!((l.QV, l.avg_gsq), (0.0, 0.0));
        assert!(l.S.iter().all(|s| *s == 2.0));
        assert_eq!(l.S.len(), 21);
        assert_eq!(l.w_gsq, None);
    }

    #[test]
    fn single_step_hand_case() {
        // g_1 = ∇f(x_1) = 1 with zero noise on ½x² at x_1 = 1.
        let oracle = Oracle::new(Objective::half_square(), Noise::Zero).unwrap();
        let p = AdamParams::calibrate(1.0, 10, 0.0, 1e-300, 1.0).unwrap();
        let mut s = RngStream::derive(1, 0, stage::NOISE);
        let tr = run_trajectory(&OptimizerSpec::Adam(p), &oracle, &[1.0], 1, &mut s).unwrap();
        assert_eq!(tr.v(1)[0], 1.0);
        let l = compute_ledger(&tr).unwrap();
        assert!((l.ASGE.unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(l.S, alloc::vec![1.0, 2.0]);
    }

    #[test]
    fn y_equals_x_without_momentum() {
        let tr = at_minimizer(0.0);
        let y = momentum_removed(&tr, 0.0).unwrap();
        for (t, yt) in y.iter().enumerate() {
            assert_eq!(yt.as_slice(), tr.x(t + 1));
        }
        assert!(momentum_removed(&tr, 0.5).is_err());
    }

    #[test]
    fn delta_split_hand_value() {
        let (d1, d2) = delta_pair(1.0, 10.0, 0.0, 1.0, 1.0);
        assert!((d1 - (1.0 / 3.0 - 1.0 / libm::sqrt(10.0))).abs() < 1e-15);
        assert!((d1 - 0.0171056).abs() < 1e-7);
        assert!(d2 < 0.0);
    }

    #[test]
    fn delta_split_requires_calibration() {
        let oracle = Oracle::new(Objective::half_square(), Noise::Zero).unwrap();
        let p = AdamParams::new(0.1, 0.0, 0.9, 1e-8, 1.0, 10).unwrap();
        let mut s = RngStream::derive(1, 0, stage::NOISE);
        let tr = run_trajectory(&OptimizerSpec::Adam(p), &oracle, &[1.0], 10, &mut s).unwrap();
        assert!(matches!(delta_split(&tr, 1, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn stopping_time_edges() {
        let tr = at_minimizer(0.5);
        assert_eq!(stopping_time(&tr, 2.0).unwrap(), StoppingTime::NotHit);
        assert_eq!(stopping_time(&tr, 1.0).unwrap(), StoppingTime::Hit(1));
        assert!(stopping_time(&tr, 0.5).is_err());
    }
}
