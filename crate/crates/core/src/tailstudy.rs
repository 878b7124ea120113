//! Seeded ensembles, empirical upper quantiles, δ-exponent fits and the
//! paired Adam/SGD separation summary.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::kernel::{stage, RngStream};
use crate::optimizers::{drive, max_eta, AdamParams, OptimizerSpec, StepKind, StepObserver, StepView};
use crate::problems::{Noise, Objective, Oracle};

pub const MIN_RUNS: u64 = 10;
pub const MAX_RUNS: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TailMetric {
    /// `(1/T) Σ_t ‖∇f(x_t)‖²`.
    #[serde(rename = "avg_gsq")]
    AvgGsq,
    /// `Σ_t η_t ‖∇f(x_t)‖²` (SGD only).
    #[serde(rename = "w_gsq")]
    WGsq,
    /// `Σ_t Σ_i γ_{t,i} (∇f(x_t))_i²` (Adam only).
    #[serde(rename = "E")]
    E,
}

impl core::str::FromStr for TailMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg_gsq" => Ok(TailMetric::AvgGsq),
            "w_gsq" => Ok(TailMetric::WGsq),
            "E" => Ok(TailMetric::E),
            other => Err(config_err!("unknown metric {other:?}; expected avg_gsq, w_gsq or E")),
        }
    }
}

/// Noise used by the ensemble: one fixed law, or a hard instance per δ with
/// three-point amplitude `A(δ) = √(T/(16δ))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NoiseMode {
    Fixed { noise: Noise },
    PerDelta { deltas: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub objective: Objective,
    pub noise: NoiseMode,
    pub optimizer: OptimizerSpec,
    pub x1: Vec<f64>,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "N")]
    pub n_runs: u64,
    pub master_seed: u64,
    pub metric: TailMetric,
}

/// `A(δ) = √(T/(16δ))`.
pub fn hard_amplitude(horizon: usize, delta: f64) -> f64 {
    libm::sqrt(horizon as f64 / (16.0 * delta))
}

/// `k` log-spaced points from `hi` down to `lo`, endpoints exact.
pub fn log_grid(hi: f64, lo: f64, k: usize) -> Result<Vec<f64>> {
    if !(hi > lo && lo > 0.0) || k < 2 {
        return Err(config_err!("log grid needs hi > lo > 0 and at least 2 points"));
    }
    let (a, b) = (libm::log10(hi), libm::log10(lo));
    Ok((0..k)
        .map(|j| match j {
            0 => hi,
            _ if j == k - 1 => lo,
            _ => libm::pow(10.0, a + (b - a) * j as f64 / (k - 1) as f64),
        })
        .collect())
}

fn check_delta_grid(deltas: &[f64]) -> Result<()> {
    if deltas.is_empty() {
        return Err(Error::Empty("delta grid"));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
        return Err(config_err!("delta grid entries must lie in (0,1), got {d}"));
    }
    if deltas.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(config_err!("delta grid must be strictly decreasing"));
    }
    Ok(())
}

/// One ensemble of an [`EnsembleSpec`]: its δ (per-δ mode) and oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub delta: Option<f64>,
    pub oracle: Oracle,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_runs < MIN_RUNS || self.n_runs > MAX_RUNS {
            errs.push(alloc::format!("N must lie in [{MIN_RUNS}, {MAX_RUNS}], got {}", self.n_runs));
        }
        if self.horizon == 0 {
            errs.push("T must be positive".into());
        }
        if self.x1.len() != self.objective.dim() {
            errs.push(alloc::format!(
                "x1 has dimension {} but the objective has d = {}",
                self.x1.len(),
                self.objective.dim()
            ));
        }
        if self.x1.iter().any(|v| !v.is_finite()) {
            errs.push("x1 must be finite".into());
        }
        if let Err(e) = self.optimizer.validate(self.horizon) {
            errs.push(alloc::format!("{e}"));
        }
        match (self.metric, &self.optimizer) {
            (TailMetric::E, OptimizerSpec::Sgd { .. }) => errs.push("metric E requires Adam".into()),
            (TailMetric::WGsq, OptimizerSpec::Adam(_)) => errs.push("metric w_gsq requires SGD".into()),
            _ => {}
        }
        if let NoiseMode::PerDelta { deltas } = &self.noise {
            if let Err(e) = check_delta_grid(deltas) {
                errs.push(alloc::format!("{e}"));
            }
        }
        if errs.is_empty() {
            self.ensembles().map(|_| ())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn ensembles(&self) -> Result<Vec<Ensemble>> {
        match &self.noise {
            NoiseMode::Fixed { noise } => {
                Ok(alloc::vec![Ensemble { delta: None, oracle: Oracle::new(self.objective.clone(), *noise)? }])
            }
            NoiseMode::PerDelta { deltas } => deltas
                .iter()
                .map(|&delta| {
                    let amplitude = hard_amplitude(self.horizon, delta);
                    Ok(Ensemble {
                        delta: Some(delta),
                        oracle: Oracle::new(self.objective.clone(), Noise::ThreePoint { amplitude })?,
                    })
                })
                .collect(),
        }
    }
}

/// All metrics of one run. A diverged run reports `+∞` for each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberMetrics {
    pub avg_gsq: f64,
    pub w_gsq: Option<f64>,
    #[serde(rename = "E")]
    pub energy: Option<f64>,
    pub diverged: bool,
}

impl MemberMetrics {
    pub fn get(&self, metric: TailMetric) -> Result<f64> {
        match metric {
            TailMetric::AvgGsq => Ok(self.avg_gsq),
            TailMetric::WGsq => self.w_gsq.ok_or_else(|| config_err!("metric w_gsq requires SGD")),
            TailMetric::E => self.energy.ok_or_else(|| config_err!("metric E requires Adam")),
        }
    }
}

#[derive(Default)]
struct MetricAcc {
    gsq: f64,
    weighted: f64,
}

impl StepObserver for MetricAcc {
    #[inline]
    fn observe(&mut self, s: &StepView<'_>) {
        let gsq: f64 = s.grad.iter().map(|v| v * v).sum();
        self.gsq += gsq;
        self.weighted += match s.kind {
            StepKind::Sgd { eta } => eta * gsq,
            StepKind::Adam { gamma, .. } => gamma.iter().zip(s.grad).map(|(gm, gr)| gm * gr * gr).sum(),
        };
    }
}

/// Runs member `run` of an ensemble under stream `(master_seed, run, "noise")`.
pub fn run_member(spec: &EnsembleSpec, oracle: &Oracle, run: u64) -> MemberMetrics {
    let mut stream = RngStream::derive(spec.master_seed, run, stage::NOISE);
    let mut acc = MetricAcc::default();
    let adam = matches!(spec.optimizer, OptimizerSpec::Adam(_));
    match drive(&spec.optimizer, oracle, &spec.x1, spec.horizon, &mut stream, &mut acc) {
        Ok(()) => MemberMetrics {
            avg_gsq: acc.gsq / spec.horizon as f64,
            w_gsq: (!adam).then_some(acc.weighted),
            energy: adam.then_some(acc.weighted),
            diverged: false,
        },
        Err(_) => MemberMetrics {
            avg_gsq: f64::INFINITY,
            w_gsq: (!adam).then_some(f64::INFINITY),
            energy: adam.then_some(f64::INFINITY),
            diverged: true,
        },
    }
}

/// Sequential ensemble: sample `i` is run `i`'s metric.
pub fn run_ensemble(spec: &EnsembleSpec, ensemble: &Ensemble) -> Result<Vec<f64>> {
    spec.validate()?;
    (0..spec.n_runs).map(|i| run_member(spec, &ensemble.oracle, i).get(spec.metric)).collect()
}

/// 1-based order-statistic index `⌈level·n⌉` clamped to `[1, n]`. A product
/// within rounding of an integer is taken as that integer, so `(1 − δ)·n`
/// does not jump one index up through representation error.
pub fn quantile_index(level: f64, n: usize) -> usize {
    let x = level * n as f64;
    let r = libm::round(x);
    let k = if (x - r).abs() <= 1e-9 * r.max(1.0) { r } else { libm::ceil(x) };
    (k as usize).clamp(1, n)
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(config_err!("quantile level must lie in (0,1), got {level}"));
    }
    Ok(())
}

pub fn empirical_quantile(samples: &[f64], level: f64) -> Result<f64> {
    check_level(level)?;
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[quantile_index(level, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantilePoint {
    pub delta: f64,
    /// Empirical `(1 − δ)`-quantile.
    pub q: f64,
    /// Samples strictly above `q`.
    pub n_exceed: u64,
}

/// Quantile point of a sample set already sorted ascending.
pub fn quantile_point_sorted(sorted: &[f64], delta: f64) -> Result<QuantilePoint> {
    check_level(1.0 - delta)?;
    if sorted.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let q = sorted[quantile_index(1.0 - delta, sorted.len()) - 1];
    let n_exceed = (sorted.len() - sorted.partition_point(|v| *v <= q)) as u64;
    Ok(QuantilePoint { delta, q, n_exceed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileCurve {
    pub points: Vec<QuantilePoint>,
}

impl QuantileCurve {
    pub fn new(points: Vec<QuantilePoint>) -> Result<Self> {
        let deltas: Vec<f64> = points.iter().map(|p| p.delta).collect();
        check_delta_grid(&deltas)?;
        Ok(Self { points })
    }

    /// Curve of one fixed sample set over a δ-grid.
    pub fn from_samples(samples: &[f64], deltas: &[f64]) -> Result<Self> {
        check_delta_grid(deltas)?;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self::new(deltas.iter().map(|&d| quantile_point_sorted(&sorted, d)).collect::<Result<_>>()?)
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.delta).collect()
    }

    /// `q_δ` nondecreasing as `δ` decreases.
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].q >= w[0].q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    pub max_residual: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub n_points: usize,
}

/// Least squares of `log q_δ` on `log(1/δ)`.
pub fn fit_exponent(curve: &QuantileCurve) -> Result<ExponentFit> {
    let pts = &curve.points;
    if pts.len() < 3 {
        return Err(config_err!("exponent fit needs at least 3 points, got {}", pts.len()));
    }
    if let Some(p) = pts.iter().find(|p| !(p.q > 0.0 && p.q.is_finite())) {
        return Err(Error::NonPositiveQuantile { delta: p.delta, q: p.q });
    }
    let xs: Vec<f64> = pts.iter().map(|p| libm::log(1.0 / p.delta)).collect();
    let ys: Vec<f64> = pts.iter().map(|p| libm::log(p.q)).collect();
    let n = pts.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let max_residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).abs())
        .fold(0.0, f64::max);
    Ok(ExponentFit {
        slope,
        intercept,
        max_residual,
        delta_min: pts.iter().map(|p| p.delta).fold(f64::INFINITY, f64::min),
        delta_max: pts.iter().map(|p| p.delta).fold(0.0, f64::max),
        n_points: pts.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationThresholds {
    pub sgd_min_slope: f64,
    pub adam_max_slope: f64,
    pub min_gap: f64,
}

impl Default for SeparationThresholds {
    fn default() -> Self {
        Self { sgd_min_slope: 0.85, adam_max_slope: 0.75, min_gap: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub delta: f64,
    pub q_adam: f64,
    pub q_sgd: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub adam_fit: ExponentFit,
    pub sgd_fit: ExponentFit,
    /// SGD slope minus Adam slope.
    pub gap: f64,
    pub ratios: Vec<RatioRow>,
    pub thresholds: SeparationThresholds,
    pub sgd_pass: bool,
    pub adam_pass: bool,
    pub gap_pass: bool,
    pub pass: bool,
}

pub fn separation_report(
    adam: &QuantileCurve,
    sgd: &QuantileCurve,
    thresholds: SeparationThresholds,
) -> Result<SeparationReport> {
    if adam.deltas() != sgd.deltas() {
        return Err(config_err!("separation curves must share the same delta grid"));
    }
    let adam_fit = fit_exponent(adam)?;
    let sgd_fit = fit_exponent(sgd)?;
    let gap = sgd_fit.slope - adam_fit.slope;
    let ratios = adam
        .points
        .iter()
        .zip(&sgd.points)
        .map(|(a, s)| RatioRow { delta: a.delta, q_adam: a.q, q_sgd: s.q, ratio: s.q / a.q })
        .collect();
    let sgd_pass = sgd_fit.slope >= thresholds.sgd_min_slope;
    let adam_pass = adam_fit.slope <= thresholds.adam_max_slope;
    let gap_pass = gap >= thresholds.min_gap;
    Ok(SeparationReport {
        adam_fit,
        sgd_fit,
        gap,
        ratios,
        thresholds,
        sgd_pass,
        adam_pass,
        gap_pass,
        pass: sgd_pass && adam_pass && gap_pass,
    })
}

/// The paired per-δ study on `½x²` from `x_1 = 0`: SGD with `γ = 1/√T`
/// against calibrated Adam with `η = 0.9·max_eta`, `β1 = 0`, `v0 = 1`,
/// `ε = 1e−8`, both under the hard noise `A(δ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationSetup {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub deltas: Vec<f64>,
    #[serde(rename = "N")]
    pub n_runs: u64,
    pub master_seed: u64,
}

pub const SEPARATION_ETA_FRACTION: f64 = 0.9;

impl SeparationSetup {
    pub fn canonical(n_runs: u64, master_seed: u64) -> Self {
        Self { horizon: 1000, deltas: log_grid(1e-1, 1e-3, 5).expect("valid grid"), n_runs, master_seed }
    }

    fn base(&self, optimizer: OptimizerSpec, metric: TailMetric) -> EnsembleSpec {
        EnsembleSpec {
            objective: Objective::half_square(),
            noise: NoiseMode::PerDelta { deltas: self.deltas.clone() },
            optimizer,
            x1: alloc::vec![0.0],
            horizon: self.horizon,
            n_runs: self.n_runs,
            master_seed: self.master_seed,
            metric,
        }
    }

    pub fn sgd_spec(&self) -> EnsembleSpec {
        self.base(OptimizerSpec::sgd_constant(1.0 / libm::sqrt(self.horizon as f64)), TailMetric::AvgGsq)
    }

    pub fn adam_spec(&self) -> Result<EnsembleSpec> {
        let eta = SEPARATION_ETA_FRACTION * max_eta(1, 1.0, 1e-8, 0.0, 1.0)?;
        let params = AdamParams::calibrate(eta, self.horizon, 0.0, 1e-8, 1.0)?;
        Ok(self.base(OptimizerSpec::Adam(params), TailMetric::AvgGsq))
    }
}

/// Fraction of samples with value `≥ threshold`.
pub fn exceedance_fraction(samples: &[f64], threshold: f64) -> f64 {
    samples.iter().filter(|v| **v >= threshold).count() as f64 / samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(deltas: &[f64], q: impl Fn(f64) -> f64) -> QuantileCurve {
        QuantileCurve::new(deltas.iter().map(|&d| QuantilePoint { delta: d, q: q(d), n_exceed: 0 }).collect())
            .unwrap()
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(empirical_quantile(&[5.0, 3.0, 1.0, 2.0, 4.0], 0.6).unwrap(), 3.0);
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0], 0.999).unwrap(), 3.0);
        assert_eq!(empirical_quantile(&[7.0; 4], 0.1).unwrap(), 7.0);
        assert!(empirical_quantile(&[], 0.5).is_err());
        assert_eq!(quantile_index(1.0 - 0.1, 10), 9);
    }

    #[test]
    fn exact_power_laws() {
        let g = [1e-1, 1e-2, 1e-3];
        let f = fit_exponent(&curve(&g, |d| 3.0 / d)).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12 && f.max_residual < 1e-12);
        let f = fit_exponent(&curve(&g, |d| 2.0 / libm::sqrt(d))).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
        let f = fit_exponent(&curve(&g, |_| 4.0)).unwrap();
        assert!(f.slope.abs() < 1e-12);
    }

    #[test]
    fn nonpositive_quantile_names_delta() {
        let c = curve(&[1e-1, 1e-2, 1e-3], |d| if d == 1e-2 { 0.0 } else { 1.0 });
        assert!(matches!(fit_exponent(&c), Err(Error::NonPositiveQuantile { delta, .. }) if delta == 1e-2));
    }

    #[test]
    fn separation_of_synthetic_curves() {
        let g = log_grid(1e-1, 1e-3, 5).unwrap();
        let a = curve(&g, |d| 1.0 / libm::sqrt(d));
        let s = curve(&g, |d| 1.0 / d);
        let r = separation_report(&a, &s, SeparationThresholds::default()).unwrap();
        assert!((r.gap - 0.5).abs() < 1e-12);
        assert!(r.pass);
        let same = separation_report(&a, &a, SeparationThresholds::default()).unwrap();
        assert_eq!(same.gap, 0.0);
        let other = curve(&[1e-1, 1e-2, 1e-3], |d| 1.0 / d);
        assert!(separation_report(&a, &other, SeparationThresholds::default()).is_err());
    }

    #[test]
    fn grid_endpoints_exact() {
        let g = log_grid(1e-1, 1e-3, 5).unwrap();
        assert_eq!((g[0], g[2], g[4]), (1e-1, 1e-2, 1e-3));
    }
}
