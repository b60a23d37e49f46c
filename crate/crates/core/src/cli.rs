//! Command-line front end. Every subcommand writes a run manifest next to
//! its output before doing any work.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{AttackMode, Objective};
use crate::harness::ablation::{render_ablation, run_ablation, Sweep};
use crate::harness::dataset::{load_dataset, write_dataset, DatasetError};
use crate::harness::experiment::{
    load_results, render_report, report_from_records, run_experiment, AnswerMetric, BaselineScorer,
    Containment, ExperimentConfig, ExperimentError, Judge, Method, ReportFormat, ResultSink,
};
use crate::harness::metrics::MetricKind;
use crate::harness::synth::{synthetic_lookup_corpus, SynthConfig};
use crate::table::DEFAULT_ORDER_KEYWORDS;
use crate::victim::{
    train_toy_victim, CheckpointError, RemoteClient, ToyVictim, TrainConfig, TrainError,
    VictimConfig,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Everything a run depends on, with defaults filled in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub victim: VictimConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    /// Read a TOML or JSON config file. A run manifest is accepted too, in
    /// which case its resolved config is used.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
        let bad = |message: String| CliError::Config {
            path: path.display().to_string(),
            message,
        };
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            let v = match v.get("config") {
                Some(c) if v.get("tool_version").is_some() => c.clone(),
                _ => v,
            };
            serde_json::from_value(v).map_err(|e| bad(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| bad(e.to_string()))
        }
    }
}

/// Written before any work starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    pub methods: Vec<Method>,
    pub sweep: Option<Sweep>,
    pub dataset: Option<PathBuf>,
    pub victim: Option<PathBuf>,
    pub seed: u64,
    pub metric: MetricKind,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Manifest path for an output file.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tabperm",
    version,
    about = "Adversarial table permutation attacks on table QA models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic lookup corpus.
    Synth(SynthArgs),
    /// Train the toy victim on a corpus.
    Train(TrainArgs),
    /// Run the gradient attack.
    Attack(AttackArgs),
    /// Run a gradient-free baseline.
    Baseline(BaselineArgs),
    /// Sweep an attack hyperparameter.
    Ablate(AblateArgs),
    /// Re-render a results file.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_examples: Option<usize>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Containment,
    Judge,
}

/// Flags shared by every experiment subcommand.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Victim checkpoint.
    #[arg(long)]
    pub victim: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Example-level parallelism; defaults to every core.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub include_order_sensitive: bool,
    #[arg(long, value_enum, default_value = "containment")]
    pub metric: MetricArg,
    /// Judge model name when `--metric judge`.
    #[arg(long)]
    pub judge_model: Option<String>,
    #[arg(long, default_value = "table")]
    pub format: ReportFormat,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Row,
    Col,
    Joint,
}

impl From<ModeArg> for AttackMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Row => AttackMode::Row,
            ModeArg::Col => AttackMode::Col,
            ModeArg::Joint => AttackMode::Joint,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ObjectiveArg {
    Ce,
    Kl,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Ce => Objective::Ce,
            ObjectiveArg::Kl => Objective::Kl,
        }
    }
}

/// Gradient attack flags.
#[derive(Debug, Args)]
pub struct AtpArgs {
    /// One or more of row, col, joint.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "joint")]
    pub mode: Vec<ModeArg>,
    #[arg(long, value_enum, default_value = "ce")]
    pub objective: ObjectiveArg,
    #[arg(long)]
    pub n_attack: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub atp: AtpArgs,
    /// Results file (one record per line).
    #[arg(long)]
    pub out: PathBuf,
    /// Keep records already in `--out` and run only the missing ones.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    Vanilla,
    Random,
    BestOfK,
    RowRvs,
    ColRvs,
    Evo,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScorerArg {
    Loss,
    Generation,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub method: BaselineMethod,
    /// Candidates for best-of-k; defaults to 20.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub scorer: Option<ScorerArg>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub generations: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub atp: AtpArgs,
    /// Grid such as `lambda=0,0.1,1,10,20` or `n_attack=5,10,20`.
    #[arg(long)]
    pub sweep: Sweep,
    /// Where to write the summary rows as JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long, default_value = "table")]
    pub format: ReportFormat,
}

fn base_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

struct ManifestParts<'a> {
    subcommand: &'a str,
    args: &'a [String],
    config: &'a RunConfig,
    methods: Vec<Method>,
    sweep: Option<Sweep>,
    dataset: Option<&'a Path>,
    victim: Option<&'a Path>,
    seed: u64,
    metric: MetricKind,
}

fn write_manifest(out: &Path, parts: ManifestParts<'_>) -> Result<RunManifest, CliError> {
    let manifest = RunManifest {
        subcommand: parts.subcommand.to_owned(),
        args: parts.args.to_vec(),
        config: parts.config.clone(),
        methods: parts.methods,
        sweep: parts.sweep,
        dataset: parts.dataset.map(Path::to_path_buf),
        victim: parts.victim.map(Path::to_path_buf),
        seed: parts.seed,
        metric: parts.metric,
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        timestamp: now(),
    };
    let path = manifest_path(out);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("bad --workers: {e}")))
}

fn cmd_synth(a: &SynthArgs, argv: &[String]) -> Result<bool, CliError> {
    let mut cfg = base_config(a.config.as_deref())?;
    set(&mut cfg.synth.n_examples, a.n_examples);
    set(&mut cfg.synth.n_rows, a.rows);
    set(&mut cfg.synth.n_cols, a.cols);
    set(&mut cfg.synth.seed, a.seed);
    write_manifest(
        &a.out,
        ManifestParts {
            subcommand: "synth",
            args: argv,
            config: &cfg,
            methods: vec![],
            sweep: None,
            dataset: None,
            victim: None,
            seed: cfg.synth.seed,
            metric: MetricKind::Containment,
        },
    )?;
    let corpus = synthetic_lookup_corpus(&cfg.synth);
    write_dataset(&a.out, &corpus)?;
    eprintln!("wrote {} examples to {}", corpus.len(), a.out.display());
    Ok(true)
}

fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<bool, CliError> {
    let mut cfg = base_config(a.config.as_deref())?;
    set(&mut cfg.train.epochs, a.epochs);
    if let Some(d) = a.d_model {
        cfg.victim.d_model = d;
        cfg.victim.d_ff = 2 * d;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.victim.seed = s;
    }
    set(&mut cfg.experiment.workers, a.workers);
    write_manifest(
        &a.out,
        ManifestParts {
            subcommand: "train",
            args: argv,
            config: &cfg,
            methods: vec![],
            sweep: None,
            dataset: Some(&a.corpus),
            victim: None,
            seed: cfg.train.seed,
            metric: MetricKind::Containment,
        },
    )?;
    let corpus = load_dataset(&a.corpus, DEFAULT_ORDER_KEYWORDS)?;
    for d in &corpus.diagnostics {
        eprintln!("{}:{}: skipped: {}", a.corpus.display(), d.line, d.message);
    }
    let (victim, report) = pool(cfg.experiment.workers)?
        .install(|| train_toy_victim(&corpus.examples, cfg.victim.clone(), &cfg.train))?;
    victim.save(&a.out)?;
    if !report.converged && cfg.train.epochs > 0 {
        eprintln!(
            "warning: training stopped after {} epochs at loss {:.4} (target {})",
            report.epochs_run, report.final_loss, cfg.train.target_loss
        );
    }
    eprintln!(
        "saved victim to {} (loss {:.4})",
        a.out.display(),
        report.final_loss
    );
    Ok(true)
}

fn apply_run_args(cfg: &mut RunConfig, r: &RunArgs) {
    let e = &mut cfg.experiment;
    set(&mut e.seed, r.seed);
    set(&mut e.workers, r.workers);
    set(&mut e.max_new_tokens, r.max_new_tokens);
    if r.include_order_sensitive {
        e.include_order_sensitive = true;
    }
}

fn apply_atp_args(cfg: &mut RunConfig, a: &AtpArgs) -> Vec<Method> {
    let atp = &mut cfg.experiment.atp;
    set(&mut atp.n_attack, a.n_attack);
    set(&mut atp.lambda1, a.lambda1);
    set(&mut atp.lambda2, a.lambda2);
    set(&mut atp.learning_rate, a.lr);
    let objective = Objective::from(a.objective);
    let mut methods = Vec::new();
    for &m in &a.mode {
        let method = Method::Atp {
            objective,
            mode: m.into(),
        };
        if !methods.contains(&method) {
            methods.push(method);
        }
    }
    methods
}

fn metric_for(r: &RunArgs) -> Result<Box<dyn AnswerMetric>, CliError> {
    match r.metric {
        MetricArg::Containment => Ok(Box::new(Containment)),
        MetricArg::Judge => {
            let model = r
                .judge_model
                .clone()
                .ok_or_else(|| CliError::Usage("--metric judge requires --judge-model".into()))?;
            Ok(Box::new(Judge(RemoteClient::from_env(model))))
        }
    }
}

/// Shared tail of attack and baseline: load inputs, run, print a summary.
fn run_and_report(
    subcommand: &str,
    run: &RunArgs,
    cfg: &RunConfig,
    methods: Vec<Method>,
    out: &Path,
    resume: bool,
    argv: &[String],
) -> Result<bool, CliError> {
    let metric = metric_for(run)?;
    write_manifest(
        out,
        ManifestParts {
            subcommand,
            args: argv,
            config: cfg,
            methods: methods.clone(),
            sweep: None,
            dataset: Some(&run.dataset),
            victim: Some(&run.victim),
            seed: cfg.experiment.seed,
            metric: metric.kind(),
        },
    )?;
    let victim = ToyVictim::load(&run.victim)?;
    let data = load_dataset(&run.dataset, DEFAULT_ORDER_KEYWORDS)?;
    for d in &data.diagnostics {
        eprintln!(
            "{}:{}: skipped: {}",
            run.dataset.display(),
            d.line,
            d.message
        );
    }
    let sink = ResultSink::file(out, resume)?;
    let report = run_experiment(
        &victim,
        &data.examples,
        &methods,
        &cfg.experiment,
        metric.as_ref(),
        sink,
    )?;
    print!("{}", render_report(&report, run.format));
    let failed = report.n_failed();
    for r in report.records.iter().filter(|r| r.is_failed()) {
        eprintln!(
            "{} [{}]: {}",
            r.id,
            r.method,
            r.error.as_deref().unwrap_or_default()
        );
    }
    Ok(failed == 0)
}

fn cmd_attack(a: &AttackArgs, argv: &[String]) -> Result<bool, CliError> {
    let mut cfg = base_config(a.run.config.as_deref())?;
    apply_run_args(&mut cfg, &a.run);
    let methods = apply_atp_args(&mut cfg, &a.atp);
    cfg.experiment
        .atp
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    run_and_report("attack", &a.run, &cfg, methods, &a.out, a.resume, argv)
}

fn cmd_baseline(a: &BaselineArgs, argv: &[String]) -> Result<bool, CliError> {
    if a.k.is_some() && a.method != BaselineMethod::BestOfK {
        return Err(CliError::Usage(
            "--k only applies to --method best-of-k".into(),
        ));
    }
    if (a.population.is_some() || a.generations.is_some()) && a.method != BaselineMethod::Evo {
        return Err(CliError::Usage(
            "--population and --generations only apply to --method evo".into(),
        ));
    }
    let mut cfg = base_config(a.run.config.as_deref())?;
    apply_run_args(&mut cfg, &a.run);
    set(&mut cfg.experiment.evo.population_size, a.population);
    set(&mut cfg.experiment.evo.generations, a.generations);
    if let Some(s) = a.scorer {
        cfg.experiment.baseline_scorer = match s {
            ScorerArg::Loss => BaselineScorer::Loss,
            ScorerArg::Generation => BaselineScorer::Generation,
        };
    }
    cfg.experiment
        .evo
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let method = match a.method {
        BaselineMethod::Vanilla => Method::Vanilla,
        BaselineMethod::Random => Method::Random,
        BaselineMethod::BestOfK => match a.k.unwrap_or(20) {
            0 => return Err(CliError::Usage("--k must be at least 1".into())),
            k => Method::BestOfK(k),
        },
        BaselineMethod::RowRvs => Method::RowReversal,
        BaselineMethod::ColRvs => Method::ColReversal,
        BaselineMethod::Evo => Method::Evolutionary,
    };
    run_and_report(
        "baseline",
        &a.run,
        &cfg,
        vec![method],
        &a.out,
        a.resume,
        argv,
    )
}

fn cmd_ablate(a: &AblateArgs, argv: &[String]) -> Result<bool, CliError> {
    let mut cfg = base_config(a.run.config.as_deref())?;
    apply_run_args(&mut cfg, &a.run);
    let methods = apply_atp_args(&mut cfg, &a.atp);
    if methods.len() != 1 {
        return Err(CliError::Usage("ablate takes a single --mode".into()));
    }
    a.sweep.validate().map_err(CliError::Usage)?;
    let metric = metric_for(&a.run)?;
    write_manifest(
        &a.out,
        ManifestParts {
            subcommand: "ablate",
            args: argv,
            config: &cfg,
            methods: methods.clone(),
            sweep: Some(a.sweep.clone()),
            dataset: Some(&a.run.dataset),
            victim: Some(&a.run.victim),
            seed: cfg.experiment.seed,
            metric: metric.kind(),
        },
    )?;
    let victim = ToyVictim::load(&a.run.victim)?;
    let data = load_dataset(&a.run.dataset, DEFAULT_ORDER_KEYWORDS)?;
    let rows = run_ablation(
        &victim,
        &data.examples,
        methods[0],
        &a.sweep,
        &cfg.experiment,
        metric.as_ref(),
    )?;
    let json = render_ablation(&rows, ReportFormat::Json);
    fs::write(&a.out, json).map_err(|e| io_err(&a.out, e))?;
    print!("{}", render_ablation(&rows, a.run.format));
    Ok(rows.iter().all(|r| r.summary.n_failed == 0))
}

fn cmd_report(a: &ReportArgs) -> Result<bool, CliError> {
    let (records, timings) = load_results(&a.results)?;
    let manifest = manifest_path(&a.results);
    let (cfg, metric) = match fs::read_to_string(&manifest) {
        Ok(text) => {
            let m: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Config {
                path: manifest.display().to_string(),
                message: e.to_string(),
            })?;
            (m.config.experiment, m.metric)
        }
        Err(_) => (ExperimentConfig::default(), MetricKind::Containment),
    };
    let report = report_from_records(&cfg, metric, records, &timings);
    print!("{}", render_report(&report, a.format));
    std::io::stdout().flush().ok();
    Ok(true)
}

/// Execute a parsed command line. `Ok(false)` means the run finished but
/// some examples failed.
pub fn execute(cli: &Cli, argv: &[String]) -> Result<bool, CliError> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, argv),
        Command::Train(a) => cmd_train(a, argv),
        Command::Attack(a) => cmd_attack(a, argv),
        Command::Baseline(a) => cmd_baseline(a, argv),
        Command::Ablate(a) => cmd_ablate(a, argv),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parse and run; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            e.print().ok();
            return code;
        }
    };
    let argv: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(&cli, &argv) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
