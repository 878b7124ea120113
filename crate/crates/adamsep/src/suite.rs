//! Randomized lemma suites, parallel over cases and collected in case order.

use std::collections::BTreeMap;

use adamsep_core::kernel::{stage, RngStream};
use adamsep_core::lemmas::{
    calibrated_case, descent_terms, gen_beta_case, run_pathwise_check, CheckId, CheckResult,
    SuiteCase, DESCENT_SE_MULTIPLE, ROUNDING_SLACK,
};
use adamsep_core::optimizers::RunError;
use rayon::prelude::*;
use serde::Serialize;

/// Fraction of descent pairs that must hold.
pub const DESCENT_PASS_FRACTION: f64 = 0.99;
/// Standard errors allowed between a martingale term's conditional mean and 0.
pub const MARTINGALE_SE_MULTIPLE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub check_id: String,
    pub seed: u64,
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub beta1: f64,
    pub margin: f64,
    pub worst_t: usize,
    pub worst_i: Option<usize>,
    pub case: u64,
}

impl Violation {
    fn new(case: &SuiteCase, r: &CheckResult) -> Self {
        Self {
            check_id: r.check_id.as_str().to_string(),
            seed: case.seed,
            d: case.d(),
            horizon: case.horizon(),
            beta1: case.params.beta1(),
            margin: r.margin,
            worst_t: r.worst_t,
            worst_i: r.worst_i,
            case: case.index,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CheckSummary {
    pub trajectories: u64,
    pub instances: u64,
    pub failures: u64,
    /// Smallest `margin + slack` seen; negative means a failure.
    pub worst_margin_plus_slack: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SuiteReport {
    pub master_seed: u64,
    pub cases: u64,
    pub per_check: BTreeMap<String, CheckSummary>,
    pub violations: Vec<Violation>,
    pub run_errors: Vec<String>,
}

impl SuiteReport {
    fn absorb(&mut self, case: &SuiteCase, results: &[CheckResult]) {
        for r in results {
            let s = self.per_check.entry(r.check_id.as_str().to_string()).or_default();
            s.trajectories += 1;
            s.instances += r.instances as u64;
            let key = r.margin + r.slack;
            s.worst_margin_plus_slack = Some(s.worst_margin_plus_slack.map_or(key, |w| w.min(key)));
            if !r.holds {
                s.failures += 1;
                self.violations.push(Violation::new(case, r));
            }
        }
    }

    /// Violations restricted to the given checks.
    pub fn violations_of<'a>(&'a self, ids: &'a [CheckId]) -> impl Iterator<Item = &'a Violation> + 'a {
        self.violations.iter().filter(move |v| ids.iter().any(|id| id.as_str() == v.check_id))
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.run_errors.is_empty()
    }
}

fn run_cases(
    master_seed: u64,
    cases: u64,
    make: fn(u64, u64) -> SuiteCase,
    checks: &[CheckId],
) -> SuiteReport {
    let results: Vec<(SuiteCase, Result<Vec<CheckResult>, String>)> = (0..cases)
        .into_par_iter()
        .map(|k| {
            let case = make(master_seed, k);
            let out = match case.run() {
                Ok(tr) => checks
                    .iter()
                    .map(|&id| run_pathwise_check(id, &tr).map_err(|e| format!("case {k} {id}: {e}")))
                    .collect(),
                Err(RunError::Diverged { step, .. }) => Err(format!("case {k}: diverged at step {step}")),
                Err(RunError::Invalid(e)) => Err(format!("case {k}: {e}")),
            };
            (case, out)
        })
        .collect();
    let mut report = SuiteReport { master_seed, cases, ..Default::default() };
    for (case, out) in results {
        match out {
            Ok(rs) => report.absorb(&case, &rs),
            Err(e) => report.run_errors.push(e),
        }
    }
    report
}

/// Every calibrated pathwise check on `cases` seeded calibrated trajectories.
pub fn calibrated_suite(master_seed: u64, cases: u64) -> SuiteReport {
    run_cases(master_seed, cases, calibrated_case, &CheckId::CALIBRATED)
}

/// The fixed-`β2` self-normalization bounds on `β1 = 0` runs.
pub fn gen_beta_suite(master_seed: u64, cases: u64) -> SuiteReport {
    run_cases(master_seed, cases, gen_beta_case, &[CheckId::GenBeta])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescentRow {
    pub pair: u64,
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub beta1: f64,
    pub t: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
    /// Conditional-mean estimates of `D1, D2, D3` and their standard errors.
    pub cond_means: [f64; 3],
    pub cond_mean_ses: [f64; 3],
    /// Whether each conditional mean lies within 4 standard errors of 0.
    pub centered: [bool; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescentReport {
    pub pairs: u64,
    pub resamples: usize,
    pub holds: u64,
    pub centered: [u64; 3],
    pub rows: Vec<DescentRow>,
    pub errors: Vec<String>,
}

impl DescentReport {
    pub fn pass(&self) -> bool {
        self.errors.is_empty() && self.holds as f64 >= DESCENT_PASS_FRACTION * self.pairs as f64
    }

    pub fn all_centered(&self) -> bool {
        self.errors.is_empty() && self.centered.iter().all(|c| *c == self.pairs)
    }
}

/// Picks pair `k`: calibrated case `k` and a step `t ∈ [1, T−1]`, then
/// evaluates the descent inequality with `n` resamples per batch.
fn descent_pair(master_seed: u64, k: u64, n: usize) -> Result<DescentRow, String> {
    let case = calibrated_case(master_seed, k);
    let tr = case.run().map_err(|e| format!("pair {k}: {e}"))?;
    let mut pick = RngStream::derive(master_seed, k, "descent-pick");
    let horizon = case.horizon();
    let t = 1 + ((pick.uniform01() * (horizon - 1) as f64) as usize).min(horizon - 2);
    let mut stream = RngStream::derive(master_seed, k, stage::RESAMPLE);
    let terms = descent_terms(&tr, t, n, &mut stream).map_err(|e| format!("pair {k}: {e}"))?;
    let rhs = terms.rhs();
    let slack = DESCENT_SE_MULTIPLE * terms.pooled_se + ROUNDING_SLACK * (1.0 + terms.lhs.abs() + rhs.abs());
    let ds = [terms.D1, terms.D2, terms.D3];
    Ok(DescentRow {
        pair: k,
        d: case.d(),
        horizon,
        beta1: case.params.beta1(),
        t,
        lhs: terms.lhs,
        rhs,
        slack,
        holds: terms.lhs <= rhs + slack,
        cond_means: ds.map(|m| m.cond_mean),
        cond_mean_ses: ds.map(|m| m.cond_mean_se),
        centered: ds.map(|m| m.cond_mean.abs() <= MARTINGALE_SE_MULTIPLE * m.cond_mean_se),
    })
}

pub fn descent_suite(master_seed: u64, pairs: u64, n: usize) -> DescentReport {
    let rows: Vec<Result<DescentRow, String>> =
        (0..pairs).into_par_iter().map(|k| descent_pair(master_seed, k, n)).collect();
    let mut report = DescentReport { pairs, resamples: n, holds: 0, centered: [0; 3], rows: Vec::new(), errors: Vec::new() };
    for r in rows {
        match r {
            Ok(row) => {
                report.holds += row.holds as u64;
                for j in 0..3 {
                    report.centered[j] += row.centered[j] as u64;
                }
                report.rows.push(row);
            }
            Err(e) => report.errors.push(e),
        }
    }
    report
}
