//! Worker pools and order-preserving parallel reductions over run indices.

use adamsep_core::lowerbound::{LbMetric, McEstimate, ShockModel, MIN_MC_RUNS};
use adamsep_core::tailstudy::{run_member, Ensemble, EnsembleSpec, MemberMetrics};
use rayon::prelude::*;

pub const WORKERS_ENV: &str = "ADAMSEP_WORKERS";

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, usize::from)
}

pub fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

/// Per-run metrics in run-index order.
pub fn ensemble_metrics(spec: &EnsembleSpec, ensemble: &Ensemble) -> Vec<MemberMetrics> {
    (0..spec.n_runs).into_par_iter().map(|i| run_member(spec, &ensemble.oracle, i)).collect()
}

const MC_CHUNK: u64 = 4096;

/// Parallel version of the core Monte Carlo estimator; the count is an
/// integer sum, so the result does not depend on scheduling.
pub fn mc_event_prob(
    model: &ShockModel,
    metric: LbMetric,
    threshold: f64,
    n: u64,
    master_seed: u64,
) -> adamsep_core::Result<McEstimate> {
    if n < MIN_MC_RUNS {
        return Err(adamsep_core::Error::Config(format!("Monte Carlo run count must be >= {MIN_MC_RUNS}, got {n}")));
    }
    let chunks = n.div_ceil(MC_CHUNK);
    let hits: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| model.exceedances(metric, threshold, master_seed, c * MC_CHUNK..((c + 1) * MC_CHUNK).min(n)))
        .sum();
    Ok(McEstimate::from_counts(hits, n))
}
