//! Command-line driver: `train`, `eval`, `diagnose`, `sweep`, `ablate`.
//!
//! Configuration is flat `key=value` text, one pair per line with `#`
//! comments; the same pairs can be passed inline as arguments. Every output
//! CSV starts with a `# seed=<seed> config_hash=<hex>` provenance line, and
//! identical configs re-produce byte-identical files (runs are deterministic
//! given the seed). Commands exit nonzero on any internal assertion failure,
//! including a violated bound.

use crate::diagnostics::{
    approx_regret_check, classical_regret_check, fb_inconsistency, relative_bound_check,
    DiagnosticsError, MuSpec,
};
use crate::linalg;
use crate::par;
use crate::potentials::{
    read_checkpoint, write_checkpoint, MirrorPair, MirrorPotential, OracleOptions, PotentialError,
};
use crate::problems::{
    features_to_csv, images_to_csv, reference_via_gd, FunctionClass, Problem, ProblemError,
    ProblemKind,
};
use crate::solvers::{
    adam_run, approx_md_run, gd_run, md_run, OracleMode, SolverError, StepSchedule, Trace,
};
use crate::tensor::Tensor;
use crate::training::{
    ablation_no_consistency, history_to_csv, train_lgd, train_lmd, Arch, TrainConfig, TrainError,
    TrainOutcome,
};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    UnknownCommand { got: String },
    /// Config file parse failure with its line number.
    Parse { line: usize, msg: String },
    MissingKey { key: &'static str },
    BadValue { key: String, msg: String },
    UnknownKey { key: String },
    /// Checkpoint potential does not match the configured potential.
    KindMismatch { checkpoint: String, config: String },
    /// A checked bound failed; reports were still written.
    BoundViolated { detail: String },
    Io(std::io::Error),
    Train(TrainError),
    Solver(SolverError),
    Potential(PotentialError),
    Problem(ProblemError),
    Diagnostics(DiagnosticsError),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnknownCommand { got } => {
                write!(f, "unknown command '{got}' (expected train|eval|diagnose|sweep|ablate)")
            }
            Self::Parse { line, msg } => write!(f, "config line {line}: {msg}"),
            Self::MissingKey { key } => write!(f, "missing required key '{key}'"),
            Self::BadValue { key, msg } => write!(f, "bad value for '{key}': {msg}"),
            Self::UnknownKey { key } => write!(f, "unknown config key '{key}'"),
            Self::KindMismatch { checkpoint, config } => {
                write!(f, "checkpoint potential '{checkpoint}' does not match config '{config}'")
            }
            Self::BoundViolated { detail } => write!(f, "bound violated: {detail}"),
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::Train(e) => write!(f, "{e}"),
            Self::Solver(e) => write!(f, "{e}"),
            Self::Potential(e) => write!(f, "{e}"),
            Self::Problem(e) => write!(f, "{e}"),
            Self::Diagnostics(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}
impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        Self::Train(e)
    }
}
impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        Self::Solver(e)
    }
}
impl From<PotentialError> for CliError {
    fn from(e: PotentialError) -> Self {
        Self::Potential(e)
    }
}
impl From<ProblemError> for CliError {
    fn from(e: ProblemError) -> Self {
        Self::Problem(e)
    }
}
impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        Self::Diagnostics(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Diagnose,
    Sweep,
    Ablate,
}

impl Command {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "train" => Ok(Self::Train),
            "eval" => Ok(Self::Eval),
            "diagnose" => Ok(Self::Diagnose),
            "sweep" => Ok(Self::Sweep),
            "ablate" => Ok(Self::Ablate),
            other => Err(CliError::UnknownCommand { got: other.to_string() }),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Eval => "eval",
            Self::Diagnose => "diagnose",
            Self::Sweep => "sweep",
            Self::Ablate => "ablate",
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "kind", "potential", "seed", "out", "checkpoint", "epochs", "batch", "rate", "beta1", "beta2",
    "unroll", "adaptive", "s0", "s_mult", "s_period", "step_init", "clip_lo", "clip_hi", "hidden",
    "mu_quad", "r", "multipliers", "instances", "iters", "base_step", "adam_step", "oracle", "dim",
    "side", "subset", "ablation",
];

/// A resolved experiment configuration: command plus flat key/value pairs.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub command: Command,
    map: BTreeMap<String, String>,
}

fn parse_kv(line: &str) -> Option<(String, String)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim().to_string(), v.trim().to_string()))
}

impl ExperimentConfig {
    pub fn from_text(command: Command, text: &str) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = parse_kv(line).ok_or(CliError::Parse {
                line: i + 1,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            if !KNOWN_KEYS.contains(&k.as_str()) {
                return Err(CliError::UnknownKey { key: k });
            }
            map.insert(k, v);
        }
        Ok(Self { command, map })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(CliError::UnknownKey { key: key.to_string() });
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| CliError::BadValue {
                key: key.to_string(),
                msg: format!("'{v}' is not a number"),
            }),
        }
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| CliError::BadValue {
                key: key.to_string(),
                msg: format!("'{v}' is not a count"),
            }),
        }
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("on") | Some("1") => Ok(true),
            Some("false") | Some("off") | Some("0") => Ok(false),
            Some(v) => Err(CliError::BadValue {
                key: key.to_string(),
                msg: format!("'{v}' is not a boolean"),
            }),
        }
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        match self.get("seed") {
            None => Ok(0),
            Some(v) => v.parse().map_err(|_| CliError::BadValue {
                key: "seed".to_string(),
                msg: format!("'{v}' is not a u64"),
            }),
        }
    }

    pub fn kind(&self) -> Result<ProblemKind, CliError> {
        let v = self.get("kind").ok_or(CliError::MissingKey { key: "kind" })?;
        ProblemKind::parse(v).ok_or_else(|| CliError::BadValue {
            key: "kind".to_string(),
            msg: format!("unknown function class '{v}'"),
        })
    }

    pub fn potential(&self) -> Result<String, CliError> {
        Ok(self
            .get("potential")
            .ok_or(CliError::MissingKey { key: "potential" })?
            .to_string())
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out").unwrap_or("out"))
    }

    pub fn multipliers(&self) -> Result<Vec<f64>, CliError> {
        match self.get("multipliers") {
            None => Ok(vec![0.5, 1.0, 2.0, 4.0]),
            Some(list) => {
                let mut out = Vec::new();
                for part in list.split(',') {
                    let v: f64 = part.trim().parse().map_err(|_| CliError::BadValue {
                        key: "multipliers".to_string(),
                        msg: format!("'{part}' is not a number"),
                    })?;
                    if v <= 0.0 {
                        return Err(CliError::BadValue {
                            key: "multipliers".to_string(),
                            msg: "multipliers must be positive".to_string(),
                        });
                    }
                    out.push(v);
                }
                Ok(out)
            }
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let kind = self.kind()?;
        let preset = TrainConfig::preset(kind, self.seed()?);
        Ok(TrainConfig {
            unroll: self.usize_or("unroll", preset.unroll)?,
            r_weight: self.f64_or("r", preset.r_weight)?,
            s0: self.f64_or("s0", preset.s0)?,
            s_multiplier: self.f64_or("s_mult", preset.s_multiplier)?,
            s_period: self.usize_or("s_period", preset.s_period)?,
            rate: self.f64_or("rate", preset.rate)?,
            betas: (self.f64_or("beta1", preset.betas.0)?, self.f64_or("beta2", preset.betas.1)?),
            batch_size: self.usize_or("batch", preset.batch_size)?,
            epochs: self.usize_or("epochs", preset.epochs)?,
            step_init: self.f64_or("step_init", preset.step_init)?,
            step_clip: (
                self.f64_or("clip_lo", preset.step_clip.0)?,
                self.f64_or("clip_hi", preset.step_clip.1)?,
            ),
            adaptive: self.bool_or("adaptive", preset.adaptive)?,
            seed: self.seed()?,
            hidden: self.usize_or("hidden", preset.hidden)?,
            mu_quad: self.f64_or("mu_quad", preset.mu_quad)?,
        })
    }

    pub fn function_class(&self) -> Result<FunctionClass, CliError> {
        let kind = self.kind()?;
        let mut fc = FunctionClass::new(kind, self.seed()?);
        if matches!(kind, ProblemKind::KlSimplex | ProblemKind::LsqSimplex) {
            let dim = self.usize_or("dim", fc.dim)?;
            fc = fc.with_dim(dim);
        }
        if matches!(kind, ProblemKind::TvDenoise | ProblemKind::TvInpaint) {
            let side = self.usize_or("side", fc.side)?;
            fc = fc.with_side(side);
        }
        if matches!(kind, ProblemKind::SvmHinge | ProblemKind::LinearClassifier) {
            let subset = self.usize_or("subset", fc.subset)?;
            fc = fc.with_subset(subset);
        }
        Ok(fc)
    }

    /// FNV-1a over the canonical sorted key=value listing. The output
    /// directory is excluded: it names where results go, not what the
    /// experiment is.
    pub fn hash_hex(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |s: &str| {
            for b in s.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        feed(self.command.name());
        feed("\n");
        for (k, v) in &self.map {
            if k == "out" {
                continue;
            }
            feed(k);
            feed("=");
            feed(v);
            feed("\n");
        }
        format!("{h:016x}")
    }

    fn provenance(&self) -> Result<String, CliError> {
        Ok(format!("# seed={} config_hash={}\n", self.seed()?, self.hash_hex()))
    }
}

/// Parse the process arguments (without the binary name) into a config.
pub fn parse_args(args: &[String]) -> Result<ExperimentConfig, CliError> {
    let command = Command::parse(args.first().map(String::as_str).unwrap_or(""))?;
    let mut file_text = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut i = 1;
    while i < args.len() {
        match args[i].as_str() {
            "--config" => {
                let path = args.get(i + 1).ok_or(CliError::MissingKey { key: "--config" })?;
                file_text = Some(std::fs::read_to_string(path)?);
                i += 2;
            }
            "--out" => {
                let v = args.get(i + 1).ok_or(CliError::MissingKey { key: "--out" })?;
                overrides.push(("out".to_string(), v.clone()));
                i += 2;
            }
            "--seed" => {
                let v = args.get(i + 1).ok_or(CliError::MissingKey { key: "--seed" })?;
                overrides.push(("seed".to_string(), v.clone()));
                i += 2;
            }
            "--oracle" => {
                let v = args.get(i + 1).ok_or(CliError::MissingKey { key: "--oracle" })?;
                overrides.push(("oracle".to_string(), v.clone()));
                i += 2;
            }
            other => {
                let (k, v) = parse_kv(other).ok_or_else(|| CliError::BadValue {
                    key: other.to_string(),
                    msg: "expected key=value or a --flag".to_string(),
                })?;
                overrides.push((k, v));
                i += 1;
            }
        }
    }
    let mut cfg = ExperimentConfig::from_text(command, file_text.as_deref().unwrap_or(""))?;
    for (k, v) in overrides {
        cfg.set(&k, &v)?;
    }
    Ok(cfg)
}

/// Run a parsed command; the binary maps errors to a nonzero exit code.
pub fn run(cfg: &ExperimentConfig) -> Result<(), CliError> {
    match cfg.command {
        Command::Train => cmd_train(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::Diagnose => cmd_diagnose(cfg),
        Command::Sweep => cmd_sweep(cfg),
        Command::Ablate => cmd_ablate(cfg),
    }
}

fn command_dir(cfg: &ExperimentConfig, kind: ProblemKind) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir().join(cfg.command.name()).join(kind.name());
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_with_provenance(cfg: &ExperimentConfig, path: &Path, body: &str) -> Result<(), CliError> {
    let mut text = cfg.provenance()?;
    text.push_str(body);
    std::fs::write(path, text)?;
    Ok(())
}

fn arch_for(cfg: &ExperimentConfig) -> Result<Arch, CliError> {
    let potential = cfg.potential()?;
    Arch::for_potential_kind(&potential).ok_or_else(|| CliError::BadValue {
        key: "potential".to_string(),
        msg: format!("'{potential}' is not trainable (use euclidean, quadratic or icnn)"),
    })
}

/// Train a pair (or the LGD step schedule) and write the checkpoint plus the
/// per-epoch loss log; feature/image datasets are dumped for inspection.
fn cmd_train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let fc = cfg.function_class()?;
    let tc = cfg.train_config()?;
    let arch = arch_for(cfg)?;
    let outcome = match arch {
        Arch::Identity => train_lgd(&fc, &tc)?,
        other => train_lmd(&fc, other, &tc)?,
    };
    write_train_outputs(cfg, &fc, &outcome, None)
}

fn write_train_outputs(
    cfg: &ExperimentConfig,
    fc: &FunctionClass,
    outcome: &TrainOutcome,
    tag: Option<&str>,
) -> Result<(), CliError> {
    let dir = command_dir(cfg, fc.kind)?;
    let potential = cfg.potential()?;
    let stem = match tag {
        None => format!("{potential}_seed{}", cfg.seed()?),
        Some(t) => format!("{potential}_{t}_seed{}", cfg.seed()?),
    };
    write_checkpoint(&dir.join(format!("{stem}.ckpt")), &outcome.pair, Some(&outcome.schedule))?;
    write_with_provenance(
        cfg,
        &dir.join(format!("{stem}_log.csv")),
        &history_to_csv(&outcome.history),
    )?;
    match fc.kind {
        ProblemKind::SvmHinge | ProblemKind::LinearClassifier => {
            if let Some((feats, labels)) = fc.features() {
                write_with_provenance(
                    cfg,
                    &dir.join(format!("{stem}_dataset.csv")),
                    &features_to_csv(feats, labels),
                )?;
            }
        }
        ProblemKind::TvDenoise | ProblemKind::TvInpaint => {
            let images: Vec<Tensor> = (0..4)
                .map(|i| {
                    let (prob, _) = fc.sample_instance(test_instance_seed(i));
                    match prob {
                        Problem::TvDenoise { y, .. } | Problem::TvInpaint { y, .. } => y,
                        _ => unreachable!(),
                    }
                })
                .collect();
            write_with_provenance(
                cfg,
                &dir.join(format!("{stem}_images.csv")),
                &images_to_csv(&images),
            )?;
        }
        _ => {}
    }
    Ok(())
}

/// Held-out instance seeds, disjoint from the training stream tags.
pub fn test_instance_seed(i: usize) -> u64 {
    crate::rng::derive(0x7e57, i as u64)
}

/// Load the pair named by the config: from a checkpoint when given, else a
/// parameter-free exact pair (euclidean/entropic).
fn load_pair(cfg: &ExperimentConfig, dim: usize) -> Result<(MirrorPair, Option<Vec<f64>>), CliError> {
    let potential = cfg.potential()?;
    match cfg.get("checkpoint") {
        Some(path) => {
            let (pair, schedule) = read_checkpoint(Path::new(path))?;
            if pair.forward.kind_name() != potential {
                return Err(CliError::KindMismatch {
                    checkpoint: pair.forward.kind_name().to_string(),
                    config: potential,
                });
            }
            Ok((pair, schedule))
        }
        None => match potential.as_str() {
            "euclidean" => Ok((MirrorPair::euclidean(dim), None)),
            "entropic" => Ok((MirrorPair::entropic(dim), None)),
            other => Err(CliError::BadValue {
                key: "potential".to_string(),
                msg: format!("'{other}' needs a checkpoint= path"),
            }),
        },
    }
}

fn oracle_mode(cfg: &ExperimentConfig, default_on: bool) -> Result<OracleMode, CliError> {
    Ok(if cfg.bool_or("oracle", default_on)? {
        OracleMode::On(OracleOptions::default())
    } else {
        OracleMode::Off
    })
}

struct EvalSetup {
    fc: FunctionClass,
    pair: MirrorPair,
    schedule: Option<Vec<f64>>,
    instances: usize,
    iterations: usize,
    base_step: f64,
    adam_step: f64,
    horizon: usize,
}

fn eval_setup(cfg: &ExperimentConfig) -> Result<EvalSetup, CliError> {
    let fc = cfg.function_class()?;
    let (pair, schedule) = load_pair(cfg, fc.dim)?;
    Ok(EvalSetup {
        fc,
        pair,
        schedule,
        instances: cfg.usize_or("instances", 10)?,
        iterations: cfg.usize_or("iters", 50)?,
        base_step: cfg.f64_or("base_step", 1e-2)?,
        adam_step: cfg.f64_or("adam_step", 5e-2)?,
        horizon: cfg.usize_or("unroll", 10)?,
    })
}

fn adaptive_schedule(setup: &EvalSetup) -> StepSchedule {
    match &setup.schedule {
        Some(values) if !values.is_empty() => {
            StepSchedule::learned(values.clone(), setup.pair.step_clip)
        }
        _ => StepSchedule::fixed(setup.base_step),
    }
}

fn run_method(
    setup: &EvalSetup,
    method: &str,
    multiplier: f64,
    prob: &Problem,
    x0: &Tensor,
    oracle: OracleMode,
) -> Result<Trace, CliError> {
    let sched = StepSchedule::multiplied(setup.base_step, multiplier);
    Ok(match method {
        "gd" => gd_run(prob, x0, &sched, setup.iterations)?,
        "adam" => adam_run(prob, x0, setup.adam_step * multiplier, setup.iterations)?,
        "lmd" => {
            if setup.pair.backward.is_exact() {
                md_run(&setup.pair, prob, x0, &sched, setup.iterations)?
            } else {
                approx_md_run(&setup.pair, prob, x0, &sched, setup.iterations, oracle)?
            }
        }
        "adaptive-lmd" => {
            let learned = adaptive_schedule(setup);
            if setup.pair.backward.is_exact() {
                md_run(&setup.pair, prob, x0, &learned, setup.iterations)?
            } else {
                approx_md_run(&setup.pair, prob, x0, &learned, setup.iterations, oracle)?
            }
        }
        other => unreachable!("unknown method {other}"),
    })
}

const EVAL_METHODS: [&str; 4] = ["lmd", "adaptive-lmd", "gd", "adam"];

fn multiplier_tag(m: f64) -> String {
    format!("{m}").replace('.', "p")
}

/// One trace CSV per (instance, multiplier, method), with the marker column
/// flagging the training horizon row.
fn cmd_eval(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let setup = eval_setup(cfg)?;
    let dir = command_dir(cfg, setup.fc.kind)?;
    let oracle = oracle_mode(cfg, false)?;
    let multipliers = cfg.multipliers()?;
    for i in 0..setup.instances {
        let (prob, x0) = setup.fc.sample_instance(test_instance_seed(i));
        for m in &multipliers {
            for method in EVAL_METHODS {
                let trace = run_method(&setup, method, *m, &prob, &x0, oracle)?;
                let name = format!("{method}_m{}_i{i}.csv", multiplier_tag(*m));
                write_with_provenance(cfg, &dir.join(name), &trace.to_csv(Some(setup.horizon)))?;
            }
        }
    }
    Ok(())
}

/// Regret-bound reports per instance plus an `all_prefixes_hold` summary;
/// a violated bound is an error after the reports are written.
fn cmd_diagnose(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let setup = eval_setup(cfg)?;
    let dir = command_dir(cfg, setup.fc.kind)?;
    let oracle = oracle_mode(cfg, true)?;
    let sched = StepSchedule::fixed(setup.base_step);
    let mut all_hold = true;
    let mut lines = Vec::new();
    for i in 0..setup.instances {
        let (prob, x0) = setup.fc.sample_instance(test_instance_seed(i));
        let reference = match prob.true_minimizer() {
            Some(_) => None,
            None => Some(reference_via_gd(&prob, &x0, 4000, setup.base_step)),
        };
        if setup.pair.backward.is_exact() {
            let trace = md_run(&setup.pair, &prob, &x0, &sched, setup.iterations)?;
            let report = classical_regret_check(
                &trace,
                &setup.pair.forward,
                &prob,
                reference.as_ref(),
                None,
            )?;
            all_hold &= report.all_prefixes_hold;
            lines.push(format!("classical instance={i} holds={}", report.all_prefixes_hold));
            write_with_provenance(cfg, &dir.join(format!("classical_i{i}.csv")), &report.to_csv())?;
            if let MirrorPotential::Quadratic { .. } = &setup.pair.forward {
                if let Some(report) = quadratic_relative_report(&setup, &prob, &x0)? {
                    all_hold &= report.all_hold;
                    lines.push(format!("relative instance={i} holds={}", report.all_hold));
                    write_with_provenance(
                        cfg,
                        &dir.join(format!("relative_i{i}.csv")),
                        &relative_to_csv(&report),
                    )?;
                }
            }
        } else {
            let trace = approx_md_run(&setup.pair, &prob, &x0, &sched, setup.iterations, oracle)?;
            let mu_spec = if prob.strong_convexity(setup.pair.forward.natural_norm()) > 0.0 {
                MuSpec::FromProblem
            } else {
                MuSpec::Augmented { mu: 1e-3 }
            };
            let report =
                approx_regret_check(&trace, &setup.pair, &prob, mu_spec, reference.as_ref())?;
            all_hold &= report.all_prefixes_hold;
            lines.push(format!("approx instance={i} holds={}", report.all_prefixes_hold));
            write_with_provenance(cfg, &dir.join(format!("approx_i{i}.csv")), &report.to_csv())?;
        }
    }
    let mut summary = lines.join("\n");
    summary.push_str(&format!("\nall_prefixes_hold={all_hold}\n"));
    write_with_provenance(cfg, &dir.join("summary.txt"), &summary)?;
    if all_hold {
        Ok(())
    } else {
        Err(CliError::BoundViolated { detail: "see summary.txt".to_string() })
    }
}

fn relative_to_csv(report: &crate::diagnostics::RelativeBoundReport) -> String {
    let mut out = String::from("k,m_term,weight,m_k,weak_bound,min_gap,holds\n");
    for k in 0..report.m_k.len() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            k + 1,
            report.m_terms[k],
            report.weights[k],
            report.m_k[k],
            report.weak_bound[k],
            report.min_gap[k],
            report.holds[k]
        ));
    }
    out
}

/// Exact-case relative bound for a quadratic pair on a quadratic objective:
/// L is the largest generalized eigenvalue of the objective Hessian against
/// the potential Hessian, and the iterates use the fixed step 1/L.
fn quadratic_relative_report(
    setup: &EvalSetup,
    prob: &Problem,
    x0: &Tensor,
) -> Result<Option<crate::diagnostics::RelativeBoundReport>, CliError> {
    let Problem::Lsq2d { w, .. } = prob else {
        return Ok(None);
    };
    let MirrorPotential::Quadratic { a } = &setup.pair.forward else {
        return Ok(None);
    };
    let hessian = w
        .transpose()
        .map_err(PotentialError::from)?
        .matmul(w)
        .map_err(PotentialError::from)?
        .scale(2.0);
    let s = linalg::symmetrize(a);
    let l = generalized_max_eigenvalue(&s, &hessian)?;
    let trace = md_run(&setup.pair, prob, x0, &StepSchedule::fixed(1.0 / l), setup.iterations)?;
    let star = prob.true_minimizer().expect("lsq-2d has a closed-form minimizer");
    Ok(Some(relative_bound_check(
        &trace.iterates,
        None,
        &setup.pair.forward,
        prob,
        l,
        0.0,
        &star,
    )?))
}

/// Largest eigenvalue of S^{-1} H via the symmetric form L^{-1} H L^{-T}.
fn generalized_max_eigenvalue(s: &Tensor, h: &Tensor) -> Result<f64, CliError> {
    let l = linalg::cholesky(s).map_err(PotentialError::from)?;
    let n = s.rows();
    let forward = |l: &Tensor, b: &[f64]| -> Vec<f64> {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = b[i];
            for k in 0..i {
                acc -= l.at(i, k) * y[k];
            }
            y[i] = acc / l.at(i, i);
        }
        y
    };
    // Z = L^{-1} H (column solves), M = L^{-1} Z' (again by columns)
    let mut z = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| h.at(i, j)).collect();
        let y = forward(&l, &col);
        for (i, v) in y.into_iter().enumerate() {
            z.set(i, j, v);
        }
    }
    let mut m = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| z.at(j, i)).collect();
        let y = forward(&l, &col);
        for (i, v) in y.into_iter().enumerate() {
            m.set(i, j, v);
        }
    }
    let sym = linalg::symmetrize(&m);
    Ok(linalg::sym_max_eigenvalue(&sym))
}

/// Aggregated comparison: median objective per (method, multiplier, k) over
/// non-diverged instances, plus a per-run file where diverged traces appear
/// with diverged=true.
fn cmd_sweep(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let setup = eval_setup(cfg)?;
    let dir = command_dir(cfg, setup.fc.kind)?;
    let oracle = oracle_mode(cfg, false)?;
    let multipliers = cfg.multipliers()?;
    let instances: Vec<(Problem, Tensor)> = (0..setup.instances)
        .map(|i| setup.fc.sample_instance(test_instance_seed(i)))
        .collect();

    struct RunOutcome {
        method: &'static str,
        multiplier: f64,
        instance: usize,
        trace: Trace,
    }
    let mut jobs: Vec<(&'static str, f64, usize)> = Vec::new();
    for method in EVAL_METHODS {
        for &m in &multipliers {
            for i in 0..instances.len() {
                jobs.push((method, m, i));
            }
        }
    }
    let runs: Vec<Result<RunOutcome, CliError>> = par::ordered_map(&jobs, |&(method, m, i)| {
        let (prob, x0) = &instances[i];
        let trace = run_method(&setup, method, m, prob, x0, oracle)?;
        Ok(RunOutcome { method, multiplier: m, instance: i, trace })
    });

    let mut run_rows = String::from("method,multiplier,instance,final_objective,diverged\n");
    let mut median_rows = String::from("method,multiplier,k,median_objective,excluded_diverged\n");
    let mut grouped: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    let mut outcomes = Vec::with_capacity(runs.len());
    for r in runs {
        outcomes.push(r?);
    }
    for (idx, run) in outcomes.iter().enumerate() {
        run_rows.push_str(&format!(
            "{},{},{},{},{}\n",
            run.method,
            run.multiplier,
            run.instance,
            run.trace.final_objective(),
            run.trace.diverged.is_some()
        ));
        grouped
            .entry((run.method.to_string(), format!("{}", run.multiplier)))
            .or_default()
            .push(idx);
    }
    for ((method, multiplier), group) in &grouped {
        let excluded = group.iter().filter(|&&i| outcomes[i].trace.diverged.is_some()).count();
        for k in 0..=setup.iterations {
            let mut values: Vec<f64> = group
                .iter()
                .filter(|&&i| outcomes[i].trace.diverged.is_none())
                .filter_map(|&i| outcomes[i].trace.objective_at(k))
                .collect();
            if values.is_empty() {
                continue;
            }
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = if values.len() % 2 == 1 {
                values[values.len() / 2]
            } else {
                0.5 * (values[values.len() / 2 - 1] + values[values.len() / 2])
            };
            median_rows.push_str(&format!("{method},{multiplier},{k},{median},{excluded}\n"));
        }
    }
    write_with_provenance(cfg, &dir.join("median.csv"), &median_rows)?;
    write_with_provenance(cfg, &dir.join("runs.csv"), &run_rows)?;
    Ok(())
}

/// Train the regularized pair, the learned-step GD baseline, and the
/// no-consistency pair, then compare objective medians and forward-backward
/// inconsistency on held-out instances.
fn cmd_ablate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let fc = cfg.function_class()?;
    let tc = cfg.train_config()?;
    let arch = match arch_for(cfg)? {
        Arch::Identity => {
            return Err(CliError::BadValue {
                key: "potential".to_string(),
                msg: "ablate compares against LGD; use quadratic or icnn".to_string(),
            })
        }
        other => other,
    };
    let lmd = train_lmd(&fc, arch, &tc)?;
    let lgd = train_lgd(&fc, &tc)?;
    let s0 = ablation_no_consistency(&fc, arch, &tc)?;
    write_train_outputs(cfg, &fc, &lmd, Some("lmd"))?;
    write_train_outputs(cfg, &fc, &lgd, Some("lgd"))?;
    write_train_outputs(cfg, &fc, &s0, Some("s0"))?;

    let dir = command_dir(cfg, fc.kind)?;
    let horizon = tc.unroll;
    let iterations = cfg.usize_or("iters", 2 * horizon)?;
    let instances = cfg.usize_or("instances", 10)?;
    let mut rows = String::from("variant,metric,value\n");
    let emit = |outcome: &TrainOutcome, label: &str, rows: &mut String| -> Result<(), CliError> {
        let sched = StepSchedule::learned(outcome.schedule.clone(), outcome.pair.step_clip);
        let mut finals = Vec::new();
        let mut fb_points = Vec::new();
        for i in 0..instances {
            let (prob, x0) = fc.sample_instance(test_instance_seed(i));
            let trace = if outcome.pair.backward.is_exact() {
                md_run(&outcome.pair, &prob, &x0, &sched, iterations)?
            } else {
                approx_md_run(&outcome.pair, &prob, &x0, &sched, iterations, OracleMode::Off)?
            };
            if let Some(v) = trace.objective_at(horizon) {
                finals.push(v);
            }
            fb_points.extend(trace.iterates.iter().take(horizon + 1).cloned());
        }
        finals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if !finals.is_empty() {
            let median = finals[finals.len() / 2];
            rows.push_str(&format!("{label},objective_at_horizon_median,{median}\n"));
        }
        if !outcome.pair.backward.is_exact() {
            let fb = fb_inconsistency(&outcome.pair, &fb_points, crate::tensor::Norm::L1)?;
            rows.push_str(&format!("{label},fb_mean,{}\n", fb.mean));
            rows.push_str(&format!("{label},fb_max,{}\n", fb.max));
        }
        Ok(())
    };
    emit(&lmd, "lmd", &mut rows)?;
    emit(&lgd, "lgd", &mut rows)?;
    emit(&s0, "s0", &mut rows)?;
    write_with_provenance(cfg, &dir.join("comparison.csv"), &rows)?;
    Ok(())
}
