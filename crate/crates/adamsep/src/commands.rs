//! Command execution: each command writes its artifacts into the run
//! directory and maps its outcome to an exit code.

use std::fs;
use std::path::{Path, PathBuf};

use adamsep_core::instrument::{compute_ledger, stopping_time, Ledger, StoppingTime};
use adamsep_core::kernel::{stage, RngStream};
use adamsep_core::lemmas::CheckId;
use adamsep_core::lowerbound::{
    build_const_instance, build_tv_instance, const_threshold_value, verify_const_instance, verify_tv_instance,
    LBReport, LbMetric, ShockModel,
};
use adamsep_core::optimizers::{run_trajectory, RunError, StepExtra};
use adamsep_core::tailstudy::{
    exceedance_fraction, fit_exponent, quantile_point_sorted, separation_report, EnsembleSpec, ExponentFit,
    MemberMetrics, QuantileCurve, SeparationReport, TailMetric,
};
use adamsep_core::{Error, Trajectory};
use serde::Serialize;

use crate::config::{Config, Job, LbInstance, LemmaJob, LowerboundJob, RunJob, SeparateJob, TailJob};
use crate::output::{fmt_f64, write_csv, write_json};
use crate::parallel;
use crate::suite::{calibrated_suite, descent_suite, gen_beta_suite, DescentReport, SuiteReport, Violation};
use crate::CliError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub dir: PathBuf,
    pub summary: String,
}

/// Runs the configured command inside a pool of `workers` threads.
pub fn execute(config: &Config, workers: usize, out_base: Option<&Path>) -> Result<Outcome, CliError> {
    let dir = config.run_dir(out_base);
    fs::create_dir_all(&dir)?;
    let ctx = Ctx { dir: dir.clone(), csv: config.formats.csv, json: config.formats.json };
    let (exit_code, summary) = parallel::pool(workers).install(|| match &config.job {
        Job::Run(j) => run(&ctx, j),
        Job::Lemmas(j) => lemmas(&ctx, j),
        Job::Lowerbound(j) => lowerbound(&ctx, j),
        Job::Tail(j) => tail(&ctx, j),
        Job::Separate(j) => separate(&ctx, j),
    })?;
    Ok(Outcome { exit_code, dir, summary })
}

struct Ctx {
    dir: PathBuf,
    csv: bool,
    json: bool,
}

impl Ctx {
    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        if self.json {
            write_json(&self.dir.join(name), value)?;
        }
        Ok(())
    }

    fn csv(&self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
        if self.csv {
            let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
            write_csv(&self.dir.join(name), &header, rows)?;
        }
        Ok(())
    }
}

fn runtime(e: Error) -> CliError {
    match e {
        Error::Config(_) | Error::InstanceInvalid(_) | Error::Domain(_) | Error::Precondition(_) => {
            CliError::Config(vec![e.to_string()])
        }
        other => CliError::Runtime(other.to_string()),
    }
}

type Exit = Result<(i32, String), CliError>;
type Samples = Vec<(Option<f64>, Vec<MemberMetrics>)>;

#[derive(Serialize)]
struct RunSummary<'a> {
    #[serde(flatten)]
    ledger: &'a Ledger,
    terminal: &'a [f64],
    stopping_time: Option<StoppingTime>,
}

fn step_rows(tr: &Trajectory) -> (Vec<String>, Vec<Vec<String>>) {
    let d = tr.dim();
    let adam = tr.adam_params().is_some();
    let mut header = vec!["t".to_string()];
    let groups: &[&str] = if adam { &["x", "g", "grad", "m", "v", "gamma"] } else { &["x", "g", "grad"] };
    for name in groups {
        header.extend((0..d).map(|i| format!("{name}_{i}")));
    }
    if !adam {
        header.push("eta".into());
    }
    let rows = tr
        .records
        .iter()
        .map(|r| {
            let mut row = vec![r.t.to_string()];
            for v in [r.x.as_slice(), r.g.as_slice(), r.grad.as_slice()] {
                row.extend(v.iter().copied().map(fmt_f64));
            }
            match &r.extra {
                StepExtra::Adam { m, v, gamma } => {
                    for part in [m, v, gamma] {
                        row.extend(part.iter().copied().map(fmt_f64));
                    }
                }
                StepExtra::Sgd { eta } => row.push(fmt_f64(*eta)),
            }
            row
        })
        .collect();
    (header, rows)
}

fn run(ctx: &Ctx, job: &RunJob) -> Exit {
    let mut stream = RngStream::derive(job.master_seed, job.run_index, stage::NOISE);
    let (tr, diverged) = match run_trajectory(&job.optimizer, &job.oracle, &job.x1, job.horizon, &mut stream) {
        Ok(tr) => (tr, None),
        Err(RunError::Diverged { step, partial }) => (*partial, Some(step)),
        Err(RunError::Invalid(e)) => return Err(runtime(e)),
    };
    let (header, rows) = step_rows(&tr);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    ctx.csv("steps.csv", &header, rows)?;
    if tr.is_empty() {
        ctx.json("ledger.json", &serde_json::json!({ "T": 0, "diverged_at": diverged }))?;
    } else {
        let ledger = compute_ledger(&tr).map_err(runtime)?;
        let stopping = match job.g_level {
            Some(g) => Some(stopping_time(&tr, g).map_err(runtime)?),
            None => None,
        };
        ctx.json("ledger.json", &RunSummary { ledger: &ledger, terminal: &tr.terminal, stopping_time: stopping })?;
    }
    Ok(match diverged {
        Some(step) => (EXIT_DIVERGED, format!("run diverged at step {step}; partial outputs written")),
        None => (EXIT_OK, format!("run completed {} steps", tr.len())),
    })
}

#[derive(Serialize)]
struct LemmaSummary<'a> {
    calibrated: &'a SuiteReport,
    gen_beta: &'a SuiteReport,
    descent: Option<&'a DescentReport>,
}

const VIOLATION_HEADER: [&str; 9] = ["check_id", "seed", "d", "T", "beta1", "margin", "worst_t", "worst_i", "case"];

fn violation_row(v: &Violation) -> Vec<String> {
    vec![
        v.check_id.clone(),
        v.seed.to_string(),
        v.d.to_string(),
        v.horizon.to_string(),
        fmt_f64(v.beta1),
        fmt_f64(v.margin),
        v.worst_t.to_string(),
        v.worst_i.map_or(String::new(), |i| i.to_string()),
        v.case.to_string(),
    ]
}

fn lemmas(ctx: &Ctx, job: &LemmaJob) -> Exit {
    let cal = calibrated_suite(job.master_seed, job.cases);
    let gb = gen_beta_suite(job.master_seed, job.gen_beta_cases);
    let descent = (job.descent_pairs > 0).then(|| descent_suite(job.master_seed, job.descent_pairs, job.resamples));
    let mut rows: Vec<Vec<String>> = cal.violations.iter().chain(&gb.violations).map(violation_row).collect();
    let descent_ok = descent.as_ref().is_none_or(|d| d.pass() && d.all_centered());
    if let Some(d) = descent.as_ref().filter(|_| !descent_ok) {
        let worst = d.rows.iter().map(|r| r.rhs + r.slack - r.lhs).fold(f64::INFINITY, f64::min);
        rows.push(vec![
            CheckId::Descent.as_str().into(),
            job.master_seed.to_string(),
            String::new(),
            String::new(),
            String::new(),
            fmt_f64(worst),
            String::new(),
            String::new(),
            String::new(),
        ]);
    }
    // Violations are always written, empty or not.
    let header: Vec<String> = VIOLATION_HEADER.iter().map(|s| s.to_string()).collect();
    write_csv(&ctx.dir.join("violations.csv"), &header, rows.iter().cloned())?;
    if let Some(d) = &descent {
        ctx.csv(
            "descent.csv",
            &["pair", "d", "T", "beta1", "t", "lhs", "rhs", "slack", "holds", "D1_mean", "D1_se", "D2_mean", "D2_se", "D3_mean", "D3_se"],
            d.rows.iter().map(|r| {
                let mut row = vec![
                    r.pair.to_string(),
                    r.d.to_string(),
                    r.horizon.to_string(),
                    fmt_f64(r.beta1),
                    r.t.to_string(),
                    fmt_f64(r.lhs),
                    fmt_f64(r.rhs),
                    fmt_f64(r.slack),
                    r.holds.to_string(),
                ];
                for j in 0..3 {
                    row.push(fmt_f64(r.cond_means[j]));
                    row.push(fmt_f64(r.cond_mean_ses[j]));
                }
                row
            }),
        )?;
    }
    ctx.json("summary.json", &LemmaSummary { calibrated: &cal, gen_beta: &gb, descent: descent.as_ref() })?;
    let errors = cal.run_errors.len() + gb.run_errors.len() + descent.as_ref().map_or(0, |d| d.errors.len());
    let clean = rows.is_empty() && errors == 0;
    let summary = format!(
        "{} calibrated cases, {} gen-beta cases: {} violations, {} run errors",
        job.cases,
        job.gen_beta_cases,
        rows.len(),
        errors
    );
    Ok((if clean { EXIT_OK } else { EXIT_FAILED }, summary))
}

fn lowerbound(ctx: &Ctx, job: &LowerboundJob) -> Exit {
    let (report, model): (LBReport, ShockModel) = match &job.instance {
        LbInstance::Const { gamma, horizon, delta, x_init } => {
            let inst = build_const_instance(*gamma, *horizon, *delta, *x_init).map_err(runtime)?;
            (verify_const_instance(&inst, job.metric).map_err(runtime)?, ShockModel::from_const(&inst))
        }
        LbInstance::Tv { schedule, horizon, delta_bar } => {
            let inst = build_tv_instance(schedule.clone(), *horizon, *delta_bar).map_err(runtime)?;
            (verify_tv_instance(&inst, job.metric, job.corollary).map_err(runtime)?, ShockModel::from_tv(&inst))
        }
    };
    let report = match job.mc_runs {
        Some(n) => {
            let mc = parallel::mc_event_prob(&model, job.metric, report.metric_threshold, n, job.master_seed)
                .map_err(runtime)?;
            report.with_mc(mc)
        }
        None => report,
    };
    ctx.json("report.json", &report)?;
    let ok = report.verdicts.all();
    let summary = format!(
        "P(event) = {} vs target {}; conditional energy {} vs threshold {}: {}",
        fmt_f64(report.exact_event_prob),
        fmt_f64(report.prob_lower_bound_target),
        fmt_f64(report.conditional_energy),
        fmt_f64(report.metric_threshold),
        if ok { "all verdicts hold" } else { "a verdict failed" }
    );
    Ok((if ok { EXIT_OK } else { EXIT_FAILED }, summary))
}

/// Samples for every ensemble of a spec, in grid order.
fn ensemble_samples(spec: &EnsembleSpec) -> Result<Samples, CliError> {
    spec.ensembles()
        .map_err(runtime)?
        .into_iter()
        .map(|e| Ok((e.delta, parallel::ensemble_metrics(spec, &e))))
        .collect()
}

fn sorted_metric(ms: &[MemberMetrics], metric: TailMetric) -> Result<Vec<f64>, CliError> {
    let mut v = ms.iter().map(|m| m.get(metric)).collect::<adamsep_core::Result<Vec<f64>>>().map_err(runtime)?;
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// One curve point per ensemble (per-δ mode) or every δ from one ensemble.
fn curve_of(
    samples: &[(Option<f64>, Vec<MemberMetrics>)],
    deltas: &[f64],
    metric: TailMetric,
) -> Result<QuantileCurve, CliError> {
    let mut points = Vec::new();
    if let [(None, ms)] = samples {
        let s = sorted_metric(ms, metric)?;
        for &d in deltas {
            points.push(quantile_point_sorted(&s, d).map_err(runtime)?);
        }
    } else {
        for (d, ms) in samples {
            let s = sorted_metric(ms, metric)?;
            points.push(quantile_point_sorted(&s, d.expect("per-delta ensemble")).map_err(runtime)?);
        }
    }
    QuantileCurve::new(points).map_err(runtime)
}

fn curve_rows(c: &QuantileCurve) -> impl Iterator<Item = Vec<String>> + '_ {
    c.points.iter().map(|p| vec![fmt_f64(p.delta), fmt_f64(p.q), p.n_exceed.to_string()])
}

#[derive(Serialize)]
struct TailSummary<'a> {
    spec: &'a EnsembleSpec,
    curve: &'a QuantileCurve,
    fit: Option<ExponentFit>,
    fit_error: Option<String>,
    monotone: bool,
    n_diverged: u64,
}

fn tail(ctx: &Ctx, job: &TailJob) -> Exit {
    let samples = ensemble_samples(&job.spec)?;
    let curve = curve_of(&samples, &job.deltas, job.spec.metric)?;
    let n_diverged = samples.iter().flat_map(|(_, ms)| ms).filter(|m| m.diverged).count() as u64;
    let fit = fit_exponent(&curve);
    ctx.csv("curve.csv", &["delta", "q", "n_exceed"], curve_rows(&curve))?;
    let (fit, fit_error) = match fit {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    ctx.json(
        "fit.json",
        &TailSummary { spec: &job.spec, curve: &curve, fit, fit_error: fit_error.clone(), monotone: curve.is_monotone(), n_diverged },
    )?;
    Ok(match (fit, fit_error) {
        (Some(f), _) => (EXIT_OK, format!("fitted exponent {}", fmt_f64(f.slope))),
        (None, e) => (EXIT_FAILED, format!("exponent fit failed: {}", e.unwrap_or_default())),
    })
}

#[derive(Serialize)]
pub struct SgdFloorRow {
    pub delta: f64,
    /// `1/(512 δ √T log(1/δ))`.
    pub threshold: f64,
    /// Fraction of SGD runs whose average squared gradient reaches it.
    pub exceedance: f64,
}

#[derive(Serialize)]
pub struct SeparationSummary {
    pub setup: adamsep_core::tailstudy::SeparationSetup,
    pub report: SeparationReport,
    pub energy_fit: ExponentFit,
    pub energy_max_slope: f64,
    pub energy_pass: bool,
    pub sgd_floor: Vec<SgdFloorRow>,
    pub n_diverged: u64,
}

/// The paired study, returning its summary and the three curves
/// (SGD, Adam, Adam energy).
pub fn separation_study(job: &SeparateJob) -> Result<(SeparationSummary, [QuantileCurve; 3]), CliError> {
    let setup = &job.setup;
    let sgd_spec = setup.sgd_spec();
    let adam_spec = setup.adam_spec().map_err(runtime)?;
    sgd_spec.validate().map_err(runtime)?;
    adam_spec.validate().map_err(runtime)?;
    let sgd = ensemble_samples(&sgd_spec)?;
    let adam = ensemble_samples(&adam_spec)?;
    let sgd_curve = curve_of(&sgd, &setup.deltas, TailMetric::AvgGsq)?;
    let adam_curve = curve_of(&adam, &setup.deltas, TailMetric::AvgGsq)?;
    let energy_curve = curve_of(&adam, &setup.deltas, TailMetric::E)?;
    let report = separation_report(&adam_curve, &sgd_curve, job.thresholds).map_err(runtime)?;
    let energy_fit = fit_exponent(&energy_curve).map_err(runtime)?;
    let sgd_floor = sgd
        .iter()
        .map(|(d, ms)| {
            let delta = d.expect("per-delta ensemble");
            let threshold = const_threshold_value(delta, setup.horizon, LbMetric::Avg);
            let vals: Vec<f64> = ms.iter().map(|m| m.avg_gsq).collect();
            SgdFloorRow { delta, threshold, exceedance: exceedance_fraction(&vals, threshold) }
        })
        .collect();
    let n_diverged = sgd.iter().chain(&adam).flat_map(|(_, ms)| ms).filter(|m| m.diverged).count() as u64;
    let summary = SeparationSummary {
        setup: setup.clone(),
        energy_pass: energy_fit.slope <= job.energy_max_slope,
        energy_fit,
        energy_max_slope: job.energy_max_slope,
        report,
        sgd_floor,
        n_diverged,
    };
    Ok((summary, [sgd_curve, adam_curve, energy_curve]))
}

fn separate(ctx: &Ctx, job: &SeparateJob) -> Exit {
    let (summary, [sgd, adam, energy]) = separation_study(job)?;
    ctx.csv("sgd_curve.csv", &["delta", "q", "n_exceed"], curve_rows(&sgd))?;
    ctx.csv("adam_curve.csv", &["delta", "q", "n_exceed"], curve_rows(&adam))?;
    ctx.csv("energy_curve.csv", &["delta", "q", "n_exceed"], curve_rows(&energy))?;
    ctx.json("separation.json", &summary)?;
    let r = &summary.report;
    let line = format!(
        "slopes: SGD {} (>= {}: {}), Adam {} (<= {}: {}), gap {} (>= {}: {}); energy slope {}",
        fmt_f64(r.sgd_fit.slope),
        r.thresholds.sgd_min_slope,
        r.sgd_pass,
        fmt_f64(r.adam_fit.slope),
        r.thresholds.adam_max_slope,
        r.adam_pass,
        fmt_f64(r.gap),
        r.thresholds.min_gap,
        r.gap_pass,
        fmt_f64(summary.energy_fit.slope),
    );
    Ok((if r.gap_pass { EXIT_OK } else { EXIT_FAILED }, line))
}
