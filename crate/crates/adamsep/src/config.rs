//! JSON experiment configuration: parsing, defaults and validation.
//!
//! Every violation found is reported, not just the first. Unknown keys are
//! errors. Relative file paths resolve against the config file's directory.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use adamsep_core::lowerbound::LbMetric;
use adamsep_core::optimizers::{max_eta, AdamParams, StepSchedule};
use adamsep_core::tailstudy::{log_grid, NoiseMode, SeparationSetup, SeparationThresholds, TailMetric};
use adamsep_core::{Error, Noise, Objective, OptimizerSpec, Oracle};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_OUT_DIR: &str = "adamsep-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Run,
    Lemmas,
    Lowerbound,
    Tail,
    Separate,
}

impl CommandKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandKind::Run => "run",
            CommandKind::Lemmas => "lemmas",
            CommandKind::Lowerbound => "lowerbound",
            CommandKind::Tail => "tail",
            CommandKind::Separate => "separate",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Self::Run, Self::Lemmas, Self::Lowerbound, Self::Tail, Self::Separate]
            .into_iter()
            .find(|c| c.as_str() == s)
    }
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunJob {
    pub oracle: Oracle,
    pub optimizer: OptimizerSpec,
    pub x1: Vec<f64>,
    pub horizon: usize,
    pub master_seed: u64,
    pub run_index: u64,
    /// Level for the first-passage time of `f̄`, if requested.
    pub g_level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaJob {
    pub cases: u64,
    pub gen_beta_cases: u64,
    pub descent_pairs: u64,
    pub resamples: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LbInstance {
    Const { gamma: f64, horizon: usize, delta: f64, x_init: f64 },
    Tv { schedule: Vec<f64>, horizon: usize, delta_bar: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowerboundJob {
    pub instance: LbInstance,
    pub metric: LbMetric,
    pub corollary: bool,
    pub mc_runs: Option<u64>,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailJob {
    pub spec: adamsep_core::tailstudy::EnsembleSpec,
    /// Quantile levels `1 − δ` to report (also the instance grid in per-δ mode).
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparateJob {
    pub setup: SeparationSetup,
    pub thresholds: SeparationThresholds,
    /// Largest accepted δ-exponent of Adam's adaptive gradient energy.
    pub energy_max_slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Job {
    Run(RunJob),
    Lemmas(LemmaJob),
    Lowerbound(LowerboundJob),
    Tail(TailJob),
    Separate(SeparateJob),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Formats {
    pub csv: bool,
    pub json: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub command: CommandKind,
    pub job: Job,
    pub out_dir: PathBuf,
    pub formats: Formats,
    /// SHA-256 of the canonical (key-sorted) config JSON plus the contents
    /// of referenced files.
    pub hash: String,
}

impl Config {
    /// `<base>/<command>-<first 16 hex digits of the hash>`.
    pub fn run_dir(&self, base_override: Option<&Path>) -> PathBuf {
        let base = base_override.unwrap_or(&self.out_dir);
        base.join(format!("{}-{}", self.command, &self.hash[..16]))
    }
}

/// Reader over one JSON object that records which keys were consumed and
/// accumulates violations.
struct Block<'a> {
    name: &'static str,
    map: Option<&'a Map<String, Value>>,
    used: BTreeSet<&'static str>,
}

impl<'a> Block<'a> {
    fn new(name: &'static str, value: Option<&'a Value>, errs: &mut Vec<String>) -> Self {
        let map = match value {
            None => None,
            Some(Value::Object(m)) => Some(m),
            Some(_) => {
                errs.push(format!("{name}: must be an object"));
                None
            }
        };
        Self { name, map, used: BTreeSet::new() }
    }

    fn present(&self) -> bool {
        self.map.is_some()
    }

    fn has(&self, key: &str) -> bool {
        self.map.is_some_and(|m| m.contains_key(key))
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a Value> {
        self.used.insert(key);
        self.map.and_then(|m| m.get(key)).filter(|v| !v.is_null())
    }

    fn f64(&mut self, key: &'static str, errs: &mut Vec<String>) -> Option<f64> {
        let name = self.name;
        match self.raw(key)? {
            Value::Number(n) => n.as_f64(),
            _ => {
                errs.push(format!("{name}.{key}: must be a number"));
                None
            }
        }
    }

    /// Integer in `[lo, hi]`.
    fn int(&mut self, key: &'static str, lo: i128, hi: i128, errs: &mut Vec<String>) -> Option<u64> {
        let name = self.name;
        let v = self.raw(key)?;
        let n = match v {
            Value::Number(n) if n.is_i64() || n.is_u64() => n.as_i64().map(i128::from).or(n.as_u64().map(i128::from)),
            Value::Number(n) => n.as_f64().filter(|f| f.fract() == 0.0 && f.abs() < 1e18).map(|f| f as i128),
            _ => None,
        };
        match n {
            None => {
                errs.push(format!("{name}.{key}: must be an integer, got {v}"));
                None
            }
            Some(n) if n < lo || n > hi => {
                errs.push(format!("{name}.{key}: must lie in [{lo}, {hi}], got {n}"));
                None
            }
            Some(n) => Some(n as u64),
        }
    }

    fn bool(&mut self, key: &'static str, errs: &mut Vec<String>) -> Option<bool> {
        let name = self.name;
        match self.raw(key)? {
            Value::Bool(b) => Some(*b),
            _ => {
                errs.push(format!("{name}.{key}: must be true or false"));
                None
            }
        }
    }

    fn str(&mut self, key: &'static str, errs: &mut Vec<String>) -> Option<&'a str> {
        let name = self.name;
        match self.raw(key)? {
            Value::String(s) => Some(s.as_str()),
            _ => {
                errs.push(format!("{name}.{key}: must be a string"));
                None
            }
        }
    }

    fn f64_list(&mut self, key: &'static str, errs: &mut Vec<String>) -> Option<Vec<f64>> {
        let name = self.name;
        let v = self.raw(key)?;
        let list = v.as_array().and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>());
        if list.is_none() {
            errs.push(format!("{name}.{key}: must be an array of numbers"));
        }
        list
    }

    fn sub(&mut self, key: &'static str, name: &'static str, errs: &mut Vec<String>) -> Block<'a> {
        let v = self.raw(key);
        Block::new(name, v, errs)
    }

    fn finish(self, errs: &mut Vec<String>) {
        if let Some(m) = self.map {
            for k in m.keys() {
                if !self.used.contains(k.as_str()) {
                    errs.push(format!("{}.{k}: unknown key", self.name));
                }
            }
        }
    }
}

/// The message of a core error without its category prefix.
fn detail(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

fn check_range(errs: &mut Vec<String>, key: &str, v: f64, ok: bool, what: &str) {
    if !ok {
        errs.push(format!("{key}: must be {what}, got {v}"));
    }
}

fn parse_problem(b: &mut Block<'_>, errs: &mut Vec<String>) -> Option<Objective> {
    let kind = b.str("objective", errs).unwrap_or("half-square");
    let d = b.int("d", 1, 1_000_000, errs).map(|d| d as usize);
    let lambda = b.f64_list("lambda", errs);
    let obj = match kind {
        "half-square" => {
            if d.is_some_and(|d| d != 1) || lambda.is_some() {
                errs.push("problem: half-square is one-dimensional and takes no lambda".into());
            }
            Ok(Objective::half_square())
        }
        "quadratic-cosine" => {
            if lambda.is_some() {
                errs.push("problem.lambda: only valid for quadratic-diag".into());
            }
            Objective::quadratic_cosine(d.unwrap_or(1))
        }
        "quadratic-diag" => match lambda {
            Some(l) => {
                if d.is_some_and(|d| d != l.len()) {
                    errs.push(format!("problem.d: does not match the {} entries of lambda", l.len()));
                }
                Objective::quadratic_diag(l)
            }
            None => {
                errs.push("problem.lambda: required for quadratic-diag".into());
                return None;
            }
        },
        other => {
            errs.push(format!(
                "problem.objective: unknown objective {other:?}; expected half-square, quadratic-cosine or quadratic-diag"
            ));
            return None;
        }
    };
    obj.map_err(|e| errs.push(format!("problem: {}", detail(&e)))).ok()
}

enum NoiseChoice {
    Fixed(Noise),
    HardInstance,
}

fn parse_oracle(b: &mut Block<'_>, errs: &mut Vec<String>) -> Option<NoiseChoice> {
    let kind = b.str("noise", errs).unwrap_or("gaussian");
    let sigma = b.f64("sigma", errs);
    let amplitude = b.f64("amplitude", errs);
    let unused = |errs: &mut Vec<String>, key: &str, v: Option<f64>| {
        if v.is_some() {
            errs.push(format!("oracle.{key}: not used by noise {kind:?}"));
        }
    };
    match kind {
        "zero" => {
            unused(errs, "sigma", sigma);
            unused(errs, "amplitude", amplitude);
            Some(NoiseChoice::Fixed(Noise::Zero))
        }
        "gaussian" => {
            unused(errs, "amplitude", amplitude);
            let sigma = sigma.unwrap_or(1.0);
            check_range(errs, "oracle.sigma", sigma, sigma.is_finite() && sigma >= 0.0, ">= 0");
            Some(NoiseChoice::Fixed(Noise::Gaussian { sigma }))
        }
        "three-point" => {
            unused(errs, "sigma", sigma);
            match amplitude {
                Some(a) => {
                    check_range(errs, "oracle.amplitude", a, a.is_finite() && a >= 1.0, ">= 1");
                    Some(NoiseChoice::Fixed(Noise::ThreePoint { amplitude: a }))
                }
                None => {
                    errs.push("oracle.amplitude: required for three-point noise".into());
                    None
                }
            }
        }
        "hard-instance" => {
            unused(errs, "sigma", sigma);
            unused(errs, "amplitude", amplitude);
            Some(NoiseChoice::HardInstance)
        }
        other => {
            errs.push(format!(
                "oracle.noise: unknown noise {other:?}; expected zero, gaussian, three-point or hard-instance"
            ));
            None
        }
    }
}

enum SgdStep {
    Constant(f64),
    Schedule(Vec<f64>),
}

enum OptChoice {
    Adam { eta: Option<f64>, gamma: Option<f64>, beta1: f64, beta2: Option<f64>, eps: f64, v0: f64 },
    Sgd(Option<SgdStep>),
}

pub fn read_schedule(path: &Path) -> Result<Vec<f64>, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = rdr.headers().map_err(|e| format!("{}: {e}", path.display()))?;
    if headers.len() != 1 || headers.get(0).map(str::trim) != Some("eta") {
        return Err(format!("{}: expected a single column with header \"eta\"", path.display()));
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
        let field = rec.get(0).unwrap_or("").trim();
        let v: f64 = field
            .parse()
            .map_err(|_| format!("{}: row {} is not a number: {field:?}", path.display(), k + 1))?;
        out.push(v);
    }
    Ok(out)
}

fn parse_optimizer(
    b: &mut Block<'_>,
    base: &Path,
    files: &mut Vec<(String, Vec<u8>)>,
    errs: &mut Vec<String>,
) -> Option<OptChoice> {
    let kind = b.str("kind", errs).unwrap_or("adam");
    let eta = b.f64("eta", errs);
    let gamma = b.f64("gamma", errs);
    let beta1 = b.f64("beta1", errs);
    let beta2 = b.f64("beta2", errs);
    let eps = b.f64("eps", errs);
    let v0 = b.f64("v0", errs);
    let schedule = b.str("schedule", errs);
    match kind {
        "adam" => {
            if schedule.is_some() {
                errs.push("optimizer.schedule: only valid for sgd".into());
            }
            if eta.is_some() && beta2.is_some() {
                errs.push("optimizer.beta2: conflicts with calibrated mode (eta given; beta2 = 1 - 1/T)".into());
            }
            if eta.is_some() && gamma.is_some() {
                errs.push("optimizer.gamma: conflicts with calibrated mode (eta given; gamma = eta/sqrt(T))".into());
            }
            if gamma.is_some() != beta2.is_some() && eta.is_none() {
                errs.push("optimizer: uncalibrated Adam needs both gamma and beta2".into());
            }
            let beta1 = beta1.unwrap_or(0.0);
            check_range(errs, "optimizer.beta1", beta1, (0.0..1.0).contains(&beta1), "in [0,1)");
            if let Some(b2) = beta2 {
                check_range(errs, "optimizer.beta2", b2, (0.0..1.0).contains(&b2), "in [0,1)");
            }
            let eps = eps.unwrap_or(1e-8);
            check_range(errs, "optimizer.eps", eps, eps.is_finite() && eps > 0.0, "> 0");
            let v0 = v0.unwrap_or(1.0);
            check_range(errs, "optimizer.v0", v0, v0.is_finite() && v0 > 0.0, "> 0");
            if let Some(e) = eta {
                check_range(errs, "optimizer.eta", e, e.is_finite() && e > 0.0, "> 0");
            }
            if let Some(g) = gamma {
                check_range(errs, "optimizer.gamma", g, g.is_finite() && g > 0.0, "> 0");
            }
            Some(OptChoice::Adam { eta, gamma, beta1, beta2, eps, v0 })
        }
        "sgd" => {
            for (key, v) in [("eta", eta), ("beta1", beta1), ("beta2", beta2), ("eps", eps), ("v0", v0)] {
                if v.is_some() {
                    errs.push(format!("optimizer.{key}: not used by sgd"));
                }
            }
            let step = match (gamma, schedule) {
                (Some(_), Some(_)) => {
                    errs.push("optimizer: give either gamma or schedule for sgd, not both".into());
                    None
                }
                (Some(g), None) => {
                    check_range(errs, "optimizer.gamma", g, g.is_finite() && g >= 0.0, ">= 0");
                    Some(SgdStep::Constant(g))
                }
                (None, Some(p)) => {
                    let path = base.join(p);
                    match std::fs::read(&path) {
                        Err(e) => {
                            errs.push(format!("optimizer.schedule: cannot read {}: {e}", path.display()));
                            None
                        }
                        Ok(bytes) => {
                            files.push((p.to_string(), bytes));
                            match read_schedule(&path) {
                                Ok(s) => Some(SgdStep::Schedule(s)),
                                Err(e) => {
                                    errs.push(format!("optimizer.schedule: {e}"));
                                    None
                                }
                            }
                        }
                    }
                }
                (None, None) => None,
            };
            Some(OptChoice::Sgd(step))
        }
        other => {
            errs.push(format!("optimizer.kind: unknown optimizer {other:?}; expected adam or sgd"));
            None
        }
    }
}

fn build_optimizer(choice: OptChoice, objective: &Objective, horizon: usize, errs: &mut Vec<String>) -> Option<OptimizerSpec> {
    match choice {
        OptChoice::Adam { eta, gamma, beta1, beta2, eps, v0 } => {
            let params = match (gamma, beta2) {
                (Some(g), Some(b2)) => AdamParams::new(g, beta1, b2, eps, v0, horizon),
                _ => {
                    let eta = match eta {
                        Some(e) => Ok(e),
                        None => max_eta(objective.dim(), v0, eps, beta1, objective.smoothness()),
                    };
                    eta.and_then(|e| AdamParams::calibrate(e, horizon, beta1, eps, v0))
                }
            };
            params.map(OptimizerSpec::Adam).map_err(|e| errs.push(format!("optimizer: {}", detail(&e)))).ok()
        }
        OptChoice::Sgd(step) => {
            let schedule = match step {
                Some(SgdStep::Constant(g)) => StepSchedule::Constant(g),
                Some(SgdStep::Schedule(s)) => StepSchedule::Explicit(s),
                None => StepSchedule::Constant(1.0 / (horizon as f64).sqrt()),
            };
            let spec = OptimizerSpec::Sgd { schedule };
            spec.validate(horizon).map_err(|e| errs.push(format!("optimizer: {}", detail(&e)))).ok()?;
            Some(spec)
        }
    }
}

fn x1_or_zeros(run: &mut Block<'_>, d: Option<usize>, errs: &mut Vec<String>) -> Vec<f64> {
    let x1 = run.f64_list("x1", errs);
    match (x1, d) {
        (Some(x), Some(d)) if x.len() != d => {
            errs.push(format!("run.x1: has {} entries but the problem has d = {d}", x.len()));
            x
        }
        (Some(x), _) => x,
        (None, d) => vec![0.0; d.unwrap_or(1)],
    }
}

fn delta_grid(run: &mut Block<'_>, errs: &mut Vec<String>) -> Vec<f64> {
    match run.f64_list("deltas", errs) {
        Some(g) => {
            if g.len() < 3 {
                errs.push("run.deltas: need at least 3 values for an exponent fit".into());
            }
            if g.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
                errs.push("run.deltas: entries must lie in (0,1)".into());
            }
            if g.windows(2).any(|w| !(w[1] < w[0])) {
                errs.push("run.deltas: must be strictly decreasing".into());
            }
            g
        }
        None => log_grid(1e-1, 1e-3, 5).expect("static grid"),
    }
}

fn forbid(errs: &mut Vec<String>, command: CommandKind, b: &Block<'_>) {
    if b.present() {
        errs.push(format!("{}: block not used by command {command}", b.name));
    }
}

pub fn parse_config(path: &Path) -> Result<Config, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(vec![format!("malformed JSON in {}: {e}", path.display())]))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_value(&root, &base)
}

/// Parses an already-loaded config; `base` resolves relative file paths.
pub fn parse_value(root: &Value, base: &Path) -> Result<Config, CliError> {
    let mut errs = Vec::new();
    let Some(obj) = root.as_object() else {
        return Err(CliError::Config(vec!["config root must be a JSON object".into()]));
    };
    for k in obj.keys() {
        if !["command", "problem", "oracle", "optimizer", "run", "output"].contains(&k.as_str()) {
            errs.push(format!("{k}: unknown key"));
        }
    }
    let command = match obj.get("command") {
        Some(Value::String(s)) => match CommandKind::parse(s) {
            Some(c) => c,
            None => {
                errs.push(format!("command: unknown command {s:?}; expected run, lemmas, lowerbound, tail or separate"));
                return Err(CliError::Config(errs));
            }
        },
        _ => {
            errs.push("command: required string".into());
            return Err(CliError::Config(errs));
        }
    };

    let mut problem = Block::new("problem", obj.get("problem"), &mut errs);
    let mut oracle = Block::new("oracle", obj.get("oracle"), &mut errs);
    let mut optimizer = Block::new("optimizer", obj.get("optimizer"), &mut errs);
    let mut run = Block::new("run", obj.get("run"), &mut errs);
    let mut output = Block::new("output", obj.get("output"), &mut errs);
    let mut files = Vec::new();

    let seed = run.int("master_seed", 0, u64::MAX as i128, &mut errs).unwrap_or(DEFAULT_SEED);
    let job = match command {
        CommandKind::Run => {
            let objective = parse_problem(&mut problem, &mut errs);
            let noise = parse_oracle(&mut oracle, &mut errs);
            let opt = parse_optimizer(&mut optimizer, base, &mut files, &mut errs);
            let horizon = run.int("T", 1, 100_000_000, &mut errs).unwrap_or(100) as usize;
            let run_index = run.int("run_index", 0, u64::MAX as i128, &mut errs).unwrap_or(0);
            let g_level = run.f64("G", &mut errs);
            if let Some(g) = g_level {
                check_range(&mut errs, "run.G", g, g >= 1.0, ">= 1");
            }
            let x1 = x1_or_zeros(&mut run, objective.as_ref().map(Objective::dim), &mut errs);
            let oracle = match (objective.clone(), noise) {
                (Some(o), Some(NoiseChoice::Fixed(n))) => Oracle::new(o, n).map_err(|e| errs.push(format!("oracle: {}", detail(&e)))).ok(),
                (_, Some(NoiseChoice::HardInstance)) => {
                    errs.push("oracle.noise: hard-instance is only available for tail".into());
                    None
                }
                _ => None,
            };
            let optimizer = match (opt, objective.as_ref()) {
                (Some(c), Some(o)) => build_optimizer(c, o, horizon, &mut errs),
                _ => None,
            };
            match (oracle, optimizer) {
                (Some(oracle), Some(optimizer)) => {
                    Some(Job::Run(RunJob { oracle, optimizer, x1, horizon, master_seed: seed, run_index, g_level }))
                }
                _ => None,
            }
        }
        CommandKind::Lemmas => {
            for b in [&problem, &oracle, &optimizer] {
                forbid(&mut errs, command, b);
            }
            let cases = run.int("cases", 1, 100_000_000, &mut errs).unwrap_or(1000);
            let gen_beta_cases = run.int("gen_beta_cases", 0, 100_000_000, &mut errs).unwrap_or(200);
            let descent_pairs = run.int("descent_pairs", 0, 1_000_000, &mut errs).unwrap_or(0);
            let resamples = run.int("resamples", 2, 100_000_000, &mut errs).unwrap_or(4096) as usize;
            Some(Job::Lemmas(LemmaJob { cases, gen_beta_cases, descent_pairs, resamples, master_seed: seed }))
        }
        CommandKind::Lowerbound => {
            for b in [&problem, &oracle] {
                forbid(&mut errs, command, b);
            }
            let opt = parse_optimizer(&mut optimizer, base, &mut files, &mut errs);
            let horizon = run.int("T", 1, 100_000_000, &mut errs).map(|t| t as usize);
            let delta = run.f64("delta", &mut errs);
            let delta_bar = run.f64("delta_bar", &mut errs);
            let x_init = run.f64("x_init", &mut errs).unwrap_or(0.0);
            let metric = match run.str("metric", &mut errs).unwrap_or("avg") {
                "avg" => Some(LbMetric::Avg),
                "weighted" => Some(LbMetric::Weighted),
                other => {
                    errs.push(format!("run.metric: unknown metric {other:?}; expected avg or weighted"));
                    None
                }
            };
            let corollary = run.bool("corollary", &mut errs).unwrap_or(false);
            let mc_runs = run.int("N", 1000, 100_000_000, &mut errs);
            let instance = match opt {
                Some(OptChoice::Sgd(step)) => {
                    let horizon = horizon.or_else(|| {
                        errs.push("run.T: required for lowerbound".into());
                        None
                    });
                    match step {
                        Some(SgdStep::Constant(gamma)) => {
                            if delta_bar.is_some() || corollary {
                                errs.push("run: delta_bar and corollary apply to schedule instances; use delta".into());
                            }
                            match (horizon, delta) {
                                (Some(horizon), Some(delta)) => Some(LbInstance::Const { gamma, horizon, delta, x_init }),
                                (_, None) => {
                                    errs.push("run.delta: required for constant-step instances".into());
                                    None
                                }
                                _ => None,
                            }
                        }
                        Some(SgdStep::Schedule(schedule)) => {
                            if run.has("x_init") {
                                errs.push("run.x_init: schedule instances start at 0".into());
                            }
                            let db = match (delta, delta_bar) {
                                (Some(_), Some(_)) => {
                                    errs.push("run: give delta or delta_bar, not both".into());
                                    None
                                }
                                (Some(d), None) => Some(16.0 * d),
                                (None, Some(db)) => Some(db),
                                (None, None) => {
                                    errs.push("run.delta_bar: required for schedule instances".into());
                                    None
                                }
                            };
                            match (horizon, db) {
                                (Some(horizon), Some(delta_bar)) => Some(LbInstance::Tv { schedule, horizon, delta_bar }),
                                _ => None,
                            }
                        }
                        None => {
                            errs.push("optimizer: lowerbound needs sgd with gamma or schedule".into());
                            None
                        }
                    }
                }
                Some(OptChoice::Adam { .. }) => {
                    errs.push("optimizer.kind: lowerbound instances are for sgd".into());
                    None
                }
                None => None,
            };
            match (instance, metric) {
                (Some(instance), Some(metric)) => {
                    Some(Job::Lowerbound(LowerboundJob { instance, metric, corollary, mc_runs, master_seed: seed }))
                }
                _ => None,
            }
        }
        CommandKind::Tail => {
            let objective = parse_problem(&mut problem, &mut errs);
            let noise = parse_oracle(&mut oracle, &mut errs);
            let opt = parse_optimizer(&mut optimizer, base, &mut files, &mut errs);
            let horizon = run.int("T", 1, 100_000_000, &mut errs).unwrap_or(100) as usize;
            let n_runs = run.int("N", 10, 100_000_000, &mut errs).unwrap_or(10_000);
            let deltas = delta_grid(&mut run, &mut errs);
            let x1 = x1_or_zeros(&mut run, objective.as_ref().map(Objective::dim), &mut errs);
            let metric = match run.str("metric", &mut errs).unwrap_or("avg_gsq").parse::<TailMetric>() {
                Ok(m) => Some(m),
                Err(e) => {
                    errs.push(format!("run.metric: {}", detail(&e)));
                    None
                }
            };
            let noise = noise.map(|n| match n {
                NoiseChoice::Fixed(noise) => NoiseMode::Fixed { noise },
                NoiseChoice::HardInstance => NoiseMode::PerDelta { deltas: deltas.clone() },
            });
            let optimizer = match (opt, objective.as_ref()) {
                (Some(c), Some(o)) => build_optimizer(c, o, horizon, &mut errs),
                _ => None,
            };
            match (objective, noise, optimizer, metric) {
                (Some(objective), Some(noise), Some(optimizer), Some(metric)) => {
                    let spec = adamsep_core::tailstudy::EnsembleSpec {
                        objective,
                        noise,
                        optimizer,
                        x1,
                        horizon,
                        n_runs,
                        master_seed: seed,
                        metric,
                    };
                    match spec.validate() {
                        Ok(()) => Some(Job::Tail(TailJob { spec, deltas })),
                        Err(e) => {
                            errs.push(format!("tail: {}", detail(&e)));
                            None
                        }
                    }
                }
                _ => None,
            }
        }
        CommandKind::Separate => {
            for b in [&problem, &oracle, &optimizer] {
                forbid(&mut errs, command, b);
            }
            let horizon = run.int("T", 10, 100_000_000, &mut errs).unwrap_or(1000) as usize;
            let n_runs = run.int("N", 10, 100_000_000, &mut errs).unwrap_or(200_000);
            let deltas = delta_grid(&mut run, &mut errs);
            let mut th = run.sub("thresholds", "run.thresholds", &mut errs);
            let d = SeparationThresholds::default();
            let thresholds = SeparationThresholds {
                sgd_min_slope: th.f64("sgd_min_slope", &mut errs).unwrap_or(d.sgd_min_slope),
                adam_max_slope: th.f64("adam_max_slope", &mut errs).unwrap_or(d.adam_max_slope),
                min_gap: th.f64("min_gap", &mut errs).unwrap_or(d.min_gap),
            };
            let energy_max_slope = th.f64("energy_max_slope", &mut errs).unwrap_or(0.15);
            th.finish(&mut errs);
            let setup = SeparationSetup { horizon, deltas, n_runs, master_seed: seed };
            Some(Job::Separate(SeparateJob { setup, thresholds, energy_max_slope }))
        }
    };

    let out_dir = output.str("directory", &mut errs).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let formats = match output.raw("formats") {
        None => Formats { csv: true, json: true },
        Some(v) => {
            let list: Option<Vec<&str>> = v.as_array().and_then(|a| a.iter().map(Value::as_str).collect());
            match list {
                Some(l) if l.iter().all(|f| *f == "csv" || *f == "json") && !l.is_empty() => {
                    Formats { csv: l.contains(&"csv"), json: l.contains(&"json") }
                }
                _ => {
                    errs.push("output.formats: must be a nonempty subset of [\"csv\", \"json\"]".into());
                    Formats { csv: true, json: true }
                }
            }
        }
    };
    for b in [problem, oracle, optimizer, run, output] {
        b.finish(&mut errs);
    }
    if !errs.is_empty() {
        return Err(CliError::Config(errs));
    }
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(root).expect("serializable value"));
    for (name, bytes) in &files {
        hasher.update(name.as_bytes());
        hasher.update(bytes);
    }
    let hash = format!("{:x}", hasher.finalize());
    Ok(Config { command, job: job.expect("no errors implies a job"), out_dir, formats, hash })
}
