//! Experiment orchestration: every (example, method) pair is attacked,
//! scored and appended to a line-delimited results file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::judge::{judge_score, JudgeRequest};
use super::metrics::{containment_score, MetricKind, MetricScore};
use crate::attack::{run_atp, AtpConfig, AttackMode, AttackResult, Objective};
use crate::baselines::{
    best_of_k, col_reversal, evolutionary_search, random_attack, row_reversal, CeScorer, EvoConfig,
    GenerationScorer, Scorer,
};
use crate::table::{ColPerm, RowPerm, TqaExample};
use crate::victim::{RemoteClient, ToyVictim};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: corrupt results record: {message}")]
    Corrupt {
        path: String,
        line: usize,
        message: String,
    },
    #[error("results file holds a record for ({id}, {method}) outside this run")]
    ForeignRecord { id: String, method: String },
    #[error("no methods requested")]
    NoMethods,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

/// An attack method, named as it appears in results and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Vanilla,
    Random,
    BestOfK(usize),
    RowReversal,
    ColReversal,
    Evolutionary,
    Atp {
        objective: Objective,
        mode: AttackMode,
    },
}

impl Method {
    pub const fn atp(mode: AttackMode) -> Self {
        Method::Atp {
            objective: Objective::Ce,
            mode,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Vanilla => f.write_str("vanilla"),
            Method::Random => f.write_str("random"),
            Method::BestOfK(k) => write!(f, "best-of-{k}"),
            Method::RowReversal => f.write_str("row-rvs"),
            Method::ColReversal => f.write_str("col-rvs"),
            Method::Evolutionary => f.write_str("evo"),
            Method::Atp { objective, mode } => {
                let obj = match objective {
                    Objective::Ce => "",
                    Objective::Kl => "kl-",
                };
                let mode = match mode {
                    AttackMode::Row => "row",
                    AttackMode::Col => "col",
                    AttackMode::Joint => "joint",
                };
                write!(f, "atp-{obj}{mode}")
            }
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mode = |m: &str| match m {
            "row" => Some(AttackMode::Row),
            "col" => Some(AttackMode::Col),
            "joint" => Some(AttackMode::Joint),
            _ => None,
        };
        let parsed = match s {
            "vanilla" => Some(Method::Vanilla),
            "random" => Some(Method::Random),
            "row-rvs" => Some(Method::RowReversal),
            "col-rvs" => Some(Method::ColReversal),
            "evo" => Some(Method::Evolutionary),
            _ => {
                if let Some(k) = s.strip_prefix("best-of-") {
                    k.parse().ok().filter(|&k| k > 0).map(Method::BestOfK)
                } else if let Some(m) = s.strip_prefix("atp-kl-") {
                    mode(m).map(|mode| Method::Atp {
                        objective: Objective::Kl,
                        mode,
                    })
                } else if let Some(m) = s.strip_prefix("atp-") {
                    mode(m).map(Method::atp)
                } else {
                    None
                }
            }
        };
        parsed.ok_or_else(|| format!("unknown method {s:?}"))
    }
}

impl TryFrom<String> for Method {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.to_string()
    }
}

/// What the gradient-free baselines maximize.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineScorer {
    /// Teacher-forced loss of the gold answer.
    #[default]
    Loss,
    /// One minus the containment score of the greedy answer.
    Generation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub atp: AtpConfig,
    pub evo: EvoConfig,
    /// Greedy decoding budget for every generation.
    pub max_new_tokens: usize,
    pub seed: u64,
    pub include_order_sensitive: bool,
    pub baseline_scorer: BaselineScorer,
    /// Example-level parallelism; 0 uses every core.
    pub workers: usize,
    /// Row label in rendered tables.
    pub victim_label: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            atp: AtpConfig::default(),
            evo: EvoConfig::default(),
            max_new_tokens: 8,
            seed: 0,
            include_order_sensitive: false,
            baseline_scorer: BaselineScorer::Loss,
            workers: 0,
            victim_label: "toy".to_owned(),
        }
    }
}

/// Scores a response against the reference answer.
pub trait AnswerMetric: Sync {
    fn kind(&self) -> MetricKind;
    fn score(&self, example: &TqaExample, response: &str) -> Result<MetricScore, String>;
}

/// Offline metric.
#[derive(Debug, Clone, Copy, Default)]
pub struct Containment;

impl AnswerMetric for Containment {
    fn kind(&self) -> MetricKind {
        MetricKind::Containment
    }

    fn score(&self, example: &TqaExample, response: &str) -> Result<MetricScore, String> {
        Ok(containment_score(&example.answer, response))
    }
}

/// Remote LLM judge.
#[derive(Debug, Clone)]
pub struct Judge(pub RemoteClient);

impl AnswerMetric for Judge {
    fn kind(&self) -> MetricKind {
        MetricKind::Judge
    }

    fn score(&self, example: &TqaExample, response: &str) -> Result<MetricScore, String> {
        let req = JudgeRequest {
            question: example.question.clone(),
            reference_answer: example.answer.clone(),
            assistant_answer: response.to_owned(),
        };
        judge_score(&self.0, &req).map_err(|e| e.to_string())
    }
}

/// Outcome of one method on one example. Failed runs carry `error` and no
/// scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub id: String,
    pub method: Method,
    pub clean_score: Option<f64>,
    pub attacked_score: Option<f64>,
    pub clean_loss: Option<f64>,
    pub attacked_loss: Option<f64>,
    pub clean_generation: Option<String>,
    pub attacked_generation: Option<String>,
    pub row_perm: Option<RowPerm>,
    pub col_perm: Option<ColPerm>,
    pub loss_trajectory: Vec<f64>,
    pub queries: usize,
    pub failed_queries: usize,
    pub error: Option<String>,
}

impl ExperimentRecord {
    fn failed(id: &str, method: Method, error: String) -> Self {
        Self {
            id: id.to_owned(),
            method,
            clean_score: None,
            attacked_score: None,
            clean_loss: None,
            attacked_loss: None,
            clean_generation: None,
            attacked_generation: None,
            row_perm: None,
            col_perm: None,
            loss_trajectory: Vec::new(),
            queries: 0,
            failed_queries: 0,
            error: Some(error),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Wall-clock cost of one record. Kept apart from the results so that the
/// results file is byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub id: String,
    pub method: Method,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Records with scores.
    pub n: usize,
    pub n_failed: usize,
    pub mean_clean_score: Option<f64>,
    pub mean_attacked_score: Option<f64>,
    pub mean_clean_loss: Option<f64>,
    pub mean_attacked_loss: Option<f64>,
    pub mean_queries: Option<f64>,
    pub mean_runtime_ms: Option<f64>,
}

impl MethodSummary {
    /// A cell is incomplete when any of its records failed.
    pub fn complete(&self) -> bool {
        self.n_failed == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub victim: String,
    pub seed: u64,
    pub metric: MetricKind,
    pub config: ExperimentConfig,
    pub methods: Vec<Method>,
    pub excluded_order_sensitive: usize,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<ExperimentRecord>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl ExperimentReport {
    /// Assemble a report, aggregating records per method with unweighted
    /// means.
    pub fn new(
        cfg: &ExperimentConfig,
        metric: MetricKind,
        methods: Vec<Method>,
        excluded_order_sensitive: usize,
        records: Vec<ExperimentRecord>,
        timings: &[Timing],
    ) -> Self {
        let summaries = methods
            .iter()
            .map(|&method| {
                let mine: Vec<&ExperimentRecord> =
                    records.iter().filter(|r| r.method == method).collect();
                let ok: Vec<&&ExperimentRecord> = mine.iter().filter(|r| !r.is_failed()).collect();
                MethodSummary {
                    method,
                    n: ok.len(),
                    n_failed: mine.len() - ok.len(),
                    mean_clean_score: mean(ok.iter().filter_map(|r| r.clean_score)),
                    mean_attacked_score: mean(ok.iter().filter_map(|r| r.attacked_score)),
                    mean_clean_loss: mean(ok.iter().filter_map(|r| r.clean_loss)),
                    mean_attacked_loss: mean(ok.iter().filter_map(|r| r.attacked_loss)),
                    mean_queries: mean(ok.iter().map(|r| r.queries as f64)),
                    mean_runtime_ms: mean(
                        timings
                            .iter()
                            .filter(|t| t.method == method)
                            .map(|t| t.runtime_ms),
                    ),
                }
            })
            .collect();
        Self {
            victim: cfg.victim_label.clone(),
            seed: cfg.seed,
            metric,
            config: cfg.clone(),
            methods,
            excluded_order_sensitive,
            summaries,
            records,
        }
    }

    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn n_failed(&self) -> usize {
        self.records.iter().filter(|r| r.is_failed()).count()
    }
}

/// Seed for one (example, method) pair: FNV-1a over the run seed, the
/// example id and the method name.
pub fn task_seed(seed: u64, id: &str, method: Method) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let name = method.to_string();
    let bytes = seed
        .to_le_bytes()
        .into_iter()
        .chain(id.bytes())
        .chain([0xff])
        .chain(name.bytes());
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn run_method(
    victim: &ToyVictim,
    ex: &TqaExample,
    method: Method,
    cfg: &ExperimentConfig,
) -> Result<AttackResult, String> {
    let seed = task_seed(cfg.seed, ex.id(), method);
    let tokens = cfg.max_new_tokens;
    let (n, m) = (ex.table.n_rows(), ex.table.n_cols());
    let ce = CeScorer(victim);
    let generation = GenerationScorer {
        victim,
        max_new_tokens: tokens,
    };
    let scorer: &dyn Scorer = match cfg.baseline_scorer {
        BaselineScorer::Loss => &ce,
        BaselineScorer::Generation => &generation,
    };
    let eval =
        |rp, cp| AttackResult::evaluate(victim, ex, rp, cp, tokens).map_err(|e| e.to_string());
    match method {
        Method::Vanilla => eval(RowPerm::identity(n), ColPerm::identity(m)),
        Method::Random => {
            let (rp, cp) = random_attack(ex, &mut ChaCha8Rng::seed_from_u64(seed));
            eval(rp, cp)
        }
        Method::RowReversal => eval(row_reversal(ex), ColPerm::identity(m)),
        Method::ColReversal => eval(RowPerm::identity(n), col_reversal(ex)),
        Method::BestOfK(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            best_of_k(victim, ex, k, scorer, &mut rng, tokens).map_err(|e| e.to_string())
        }
        Method::Evolutionary => {
            let evo = EvoConfig {
                seed,
                max_new_tokens: tokens,
                ..cfg.evo.clone()
            };
            evolutionary_search(victim, ex, &evo, scorer).map_err(|e| e.to_string())
        }
        Method::Atp { objective, mode } => {
            let atp = AtpConfig {
                objective,
                mode,
                seed,
                max_new_tokens: tokens,
                ..cfg.atp.clone()
            };
            run_atp(victim, ex, &atp).map_err(|e| e.to_string())
        }
    }
}

/// Attack one example with one method and score both generations.
pub fn run_task(
    victim: &ToyVictim,
    ex: &TqaExample,
    method: Method,
    cfg: &ExperimentConfig,
    metric: &dyn AnswerMetric,
) -> ExperimentRecord {
    let res = match run_method(victim, ex, method, cfg) {
        Ok(r) => r,
        Err(e) => return ExperimentRecord::failed(ex.id(), method, e),
    };
    let scores = metric.score(ex, &res.clean_generation).and_then(|c| {
        metric
            .score(ex, &res.attacked_generation)
            .map(|a| (c.value, a.value))
    });
    let (clean, attacked) = match scores {
        Ok(s) => s,
        Err(e) => return ExperimentRecord::failed(ex.id(), method, format!("metric: {e}")),
    };
    ExperimentRecord {
        id: ex.id().to_owned(),
        method,
        clean_score: Some(clean),
        attacked_score: Some(attacked),
        clean_loss: Some(res.clean_loss),
        attacked_loss: Some(res.attacked_loss),
        clean_generation: Some(res.clean_generation),
        attacked_generation: Some(res.attacked_generation),
        row_perm: Some(res.row_perm),
        col_perm: Some(res.col_perm),
        loss_trajectory: res.loss_trajectory,
        queries: res.queries,
        failed_queries: res.failed_queries,
        error: None,
    }
}

/// Where records go as they complete.
///
/// A file sink appends each finished record immediately, so a crash loses
/// only work in flight. On completion the file is rewritten in canonical
/// (example, method) order, which makes resumed and uninterrupted runs
/// byte-identical.
pub struct ResultSink {
    path: Option<PathBuf>,
    existing: Vec<ExperimentRecord>,
    existing_timings: Vec<Timing>,
}

impl ResultSink {
    pub fn memory() -> Self {
        Self {
            path: None,
            existing: Vec::new(),
            existing_timings: Vec::new(),
        }
    }

    /// Sink writing to `path`. With `resume`, records already present are
    /// kept and their tasks skipped; a truncated final line is discarded.
    /// Without it any previous file is replaced.
    pub fn file(path: impl Into<PathBuf>, resume: bool) -> Result<Self, ExperimentError> {
        let path = path.into();
        let mut sink = Self {
            path: Some(path.clone()),
            existing: Vec::new(),
            existing_timings: Vec::new(),
        };
        if resume && path.exists() {
            sink.existing = read_jsonl_prefix(&path)?;
            let tpath = timing_path(&path);
            if tpath.exists() {
                sink.existing_timings = read_jsonl_prefix(&tpath)?;
            }
        } else {
            for p in [path.clone(), timing_path(&path)] {
                if p.exists() {
                    fs::remove_file(&p).map_err(|source| io_err(&p, source))?;
                }
            }
        }
        Ok(sink)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }
}

/// Sidecar holding per-record runtimes next to a results file.
pub fn timing_path(results: &Path) -> PathBuf {
    let mut name = results.file_name().unwrap_or_default().to_os_string();
    name.push(".timing");
    results.with_file_name(name)
}

fn io_err(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parse every complete line of a JSONL file. A final line that is cut
/// short or unparseable is dropped and truncated away; corruption anywhere
/// else is an error.
fn read_jsonl_prefix<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<Vec<T>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    let mut good_len = 0;
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        let last = i + 1 == lines.len();
        let body = line.trim_end_matches('\n');
        if body.trim().is_empty() {
            good_len += line.len();
            continue;
        }
        match serde_json::from_str::<T>(body) {
            Ok(r) if line.ends_with('\n') => {
                out.push(r);
                good_len += line.len();
            }
            _ if last => break,
            Ok(_) => unreachable!("only the final line can lack a newline"),
            Err(e) => {
                return Err(ExperimentError::Corrupt {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    if good_len < text.len() {
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        f.set_len(good_len as u64).map_err(|e| io_err(path, e))?;
    }
    Ok(out)
}

fn write_line<T: Serialize>(w: &mut File, value: &T) -> std::io::Result<()> {
    let mut line = serde_json::to_string(value).expect("record serializes");
    line.push('\n');
    w.write_all(line.as_bytes())?;
    w.flush()
}

fn write_all_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ExperimentError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    for item in items {
        write_line(&mut f, item).map_err(|e| io_err(&tmp, e))?;
    }
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

struct Appender {
    results: File,
    timings: File,
    path: PathBuf,
}

/// Run every method on every example and collect a report.
///
/// Order-sensitive examples are dropped unless the config asks to keep
/// them. Per-task failures are recorded and the run continues.
pub fn run_experiment(
    victim: &ToyVictim,
    examples: &[TqaExample],
    methods: &[Method],
    cfg: &ExperimentConfig,
    metric: &dyn AnswerMetric,
    sink: ResultSink,
) -> Result<ExperimentReport, ExperimentError> {
    if methods.is_empty() {
        return Err(ExperimentError::NoMethods);
    }
    cfg.atp
        .validate()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    cfg.evo
        .validate()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;

    let mut methods_dedup = Vec::new();
    for &m in methods {
        if !methods_dedup.contains(&m) {
            methods_dedup.push(m);
        }
    }
    let excluded = if cfg.include_order_sensitive {
        0
    } else {
        examples.iter().filter(|e| e.order_sensitive).count()
    };
    let kept: Vec<TqaExample> = examples
        .iter()
        .filter(|e| cfg.include_order_sensitive || !e.order_sensitive)
        .map(|e| TqaExample {
            order_sensitive: false,
            ..e.clone()
        })
        .collect();

    let mut tasks: Vec<(usize, usize)> = Vec::new();
    let mut index: HashMap<(String, Method), usize> = HashMap::new();
    for (ei, ex) in kept.iter().enumerate() {
        for (mi, &m) in methods_dedup.iter().enumerate() {
            if index.insert((ex.id().to_owned(), m), tasks.len()).is_none() {
                tasks.push((ei, mi));
            }
        }
    }

    let mut done: BTreeMap<usize, ExperimentRecord> = BTreeMap::new();
    for r in sink.existing {
        let Some(&t) = index.get(&(r.id.clone(), r.method)) else {
            return Err(ExperimentError::ForeignRecord {
                id: r.id,
                method: r.method.to_string(),
            });
        };
        done.insert(t, r);
    }
    let mut timings: HashMap<usize, Timing> = sink
        .existing_timings
        .into_iter()
        .filter_map(|t| index.get(&(t.id.clone(), t.method)).map(|&i| (i, t)))
        .collect();

    let appender = match &sink.path {
        Some(path) => {
            let open = |p: &Path| {
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| io_err(p, e))
            };
            Some(Mutex::new(Appender {
                results: open(path)?,
                timings: open(&timing_path(path))?,
                path: path.clone(),
            }))
        }
        None => None,
    };

    let pending: Vec<usize> = (0..tasks.len()).filter(|t| !done.contains_key(t)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;
    let fresh: Vec<Result<(usize, ExperimentRecord, Timing), ExperimentError>> =
        pool.install(|| {
            pending
                .par_iter()
                .map(|&t| {
                    let (ei, mi) = tasks[t];
                    let (ex, method) = (&kept[ei], methods_dedup[mi]);
                    let start = Instant::now();
                    let record = run_task(victim, ex, method, cfg, metric);
                    let timing = Timing {
                        id: ex.id().to_owned(),
                        method,
                        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
                    };
                    if let Some(app) = &appender {
                        let mut app = app.lock().unwrap_or_else(|p| p.into_inner());
                        let path = app.path.clone();
                        write_line(&mut app.results, &record).map_err(|e| io_err(&path, e))?;
                        write_line(&mut app.timings, &timing)
                            .map_err(|e| io_err(&timing_path(&path), e))?;
                    }
                    Ok((t, record, timing))
                })
                .collect()
        });
    for item in fresh {
        let (t, record, timing) = item?;
        done.insert(t, record);
        timings.insert(t, timing);
    }
    drop(appender);

    let records: Vec<ExperimentRecord> = done.into_values().collect();
    let timings: Vec<Timing> = {
        let mut v: Vec<(usize, Timing)> = timings.into_iter().collect();
        v.sort_by_key(|(i, _)| *i);
        v.into_iter().map(|(_, t)| t).collect()
    };
    if let Some(path) = &sink.path {
        write_all_lines(path, &records)?;
        write_all_lines(&timing_path(path), &timings)?;
    }
    Ok(ExperimentReport::new(
        cfg,
        metric.kind(),
        methods_dedup,
        excluded,
        records,
        &timings,
    ))
}

/// Read a results file (and its timing sidecar, if present).
pub fn load_results(
    path: impl AsRef<Path>,
) -> Result<(Vec<ExperimentRecord>, Vec<Timing>), ExperimentError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ExperimentError::Corrupt {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<ExperimentRecord>, _>>()?;
    let tpath = timing_path(path);
    let timings = match File::open(&tpath) {
        Ok(f) => BufReader::new(f)
            .lines()
            .map_while(Result::ok)
            .filter_map(|l| serde_json::from_str(&l).ok())
            .collect(),
        Err(_) => Vec::new(),
    };
    Ok((records, timings))
}

/// Rebuild a report from persisted records. Methods appear in order of
/// first occurrence.
pub fn report_from_records(
    cfg: &ExperimentConfig,
    metric: MetricKind,
    records: Vec<ExperimentRecord>,
    timings: &[Timing],
) -> ExperimentReport {
    let mut seen = HashSet::new();
    let methods: Vec<Method> = records
        .iter()
        .map(|r| r.method)
        .filter(|m| seen.insert(*m))
        .collect();
    ExperimentReport::new(cfg, metric, methods, 0, records, timings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!(
                "unknown report format {s:?} (expected table, csv or json)"
            )),
        }
    }
}

fn fmt_opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "-".to_owned(), |v| format!("{v:.digits$}"))
}

/// Render a report. The table layout has one row per victim and one column
/// per method holding the mean attacked score; `*` marks a cell with failed
/// records.
pub fn render_report(report: &ExperimentReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).expect("report serializes") + "\n"
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "victim",
                "method",
                "n",
                "n_failed",
                "mean_clean_score",
                "mean_attacked_score",
                "mean_clean_loss",
                "mean_attacked_loss",
                "mean_queries",
            ])
            .expect("in-memory write");
            for s in &report.summaries {
                let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
                w.write_record([
                    report.victim.clone(),
                    s.method.to_string(),
                    s.n.to_string(),
                    s.n_failed.to_string(),
                    opt(s.mean_clean_score),
                    opt(s.mean_attacked_score),
                    opt(s.mean_clean_loss),
                    opt(s.mean_attacked_loss),
                    opt(s.mean_queries),
                ])
                .expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
        }
        ReportFormat::Table => {
            let mut header = vec!["victim".to_owned()];
            let mut row = vec![report.victim.clone()];
            for s in &report.summaries {
                header.push(s.method.to_string());
                let mark = if s.complete() { "" } else { "*" };
                row.push(format!("{}{mark}", fmt_opt(s.mean_attacked_score, 3)));
            }
            let widths: Vec<usize> = header
                .iter()
                .zip(&row)
                .map(|(h, r)| h.len().max(r.len()))
                .collect();
            let line = |cells: &[String]| {
                let padded: Vec<String> = cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:<w$}"))
                    .collect();
                padded.join(" | ").trim_end().to_owned() + "\n"
            };
            let mut out = line(&header);
            if !report.summaries.is_empty() {
                out += &line(&row);
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{synthetic_lookup_corpus, SynthConfig};
    use crate::table::{Table, DEFAULT_ORDER_KEYWORDS};
    use crate::victim::{corpus_vocab, VictimConfig};

    fn setup(n: usize) -> (ToyVictim, Vec<TqaExample>) {
        let corpus = synthetic_lookup_corpus(&SynthConfig {
            n_examples: n,
            n_rows: 3,
            n_cols: 3,
            ..Default::default()
        });
        let v = ToyVictim::init(
            corpus_vocab(&corpus),
            VictimConfig {
                d_model: 8,
                d_ff: 8,
                ..Default::default()
            },
        );
        (v, corpus)
    }

    fn quick() -> ExperimentConfig {
        ExperimentConfig {
            atp: AtpConfig {
                n_attack: 2,
                ..Default::default()
            },
            workers: 2,
            ..Default::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        let all = [
            Method::Vanilla,
            Method::Random,
            Method::BestOfK(20),
            Method::RowReversal,
            Method::ColReversal,
            Method::Evolutionary,
            Method::atp(AttackMode::Joint),
            Method::atp(AttackMode::Row),
            Method::Atp {
                objective: Objective::Kl,
                mode: AttackMode::Col,
            },
        ];
        for m in all {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), m);
        }
        assert_eq!(Method::atp(AttackMode::Joint).to_string(), "atp-joint");
        assert!("best-of-0".parse::<Method>().is_err());
        assert!("atp-diag".parse::<Method>().is_err());
    }

    #[test]
    fn vanilla_scores_match_and_reversal_of_single_row_is_vanilla() {
        let (v, mut corpus) = setup(3);
        let one_row = Table::from_grid(
            "single",
            vec![vec!["k".into(), "a".into()], vec!["oak".into(), "5".into()]],
        )
        .unwrap();
        corpus.push(
            TqaExample::new(one_row, "What is a of oak?", "5", DEFAULT_ORDER_KEYWORDS).unwrap(),
        );
        let rep = run_experiment(
            &v,
            &corpus,
            &[Method::Vanilla, Method::RowReversal],
            &quick(),
            &Containment,
            ResultSink::memory(),
        )
        .unwrap();
        assert_eq!(rep.records.len(), 8);
        for r in rep.records.iter().filter(|r| r.method == Method::Vanilla) {
            assert_eq!(r.clean_score, r.attacked_score);
        }
        let pick = |m| {
            rep.records
                .iter()
                .find(|r| r.id == "single" && r.method == m)
                .unwrap()
        };
        let (a, b) = (pick(Method::Vanilla), pick(Method::RowReversal));
        assert_eq!(
            (&a.attacked_generation, a.attacked_score),
            (&b.attacked_generation, b.attacked_score)
        );
    }

    #[test]
    fn order_sensitive_examples_are_filtered() {
        let (v, mut corpus) = setup(2);
        let mut ex = corpus[0].clone();
        ex.question = "What is the first height?".into();
        ex.order_sensitive = true;
        ex.table = Table::from_grid("sens", ex.table.to_grid()).unwrap();
        corpus.push(ex);
        let rep = run_experiment(
            &v,
            &corpus,
            &[Method::Vanilla],
            &quick(),
            &Containment,
            ResultSink::memory(),
        )
        .unwrap();
        assert_eq!(rep.excluded_order_sensitive, 1);
        assert!(rep.records.iter().all(|r| r.id != "sens"));
        let cfg = ExperimentConfig {
            include_order_sensitive: true,
            ..quick()
        };
        let methods = [Method::atp(AttackMode::Joint)];
        let rep = run_experiment(
            &v,
            &corpus,
            &methods,
            &cfg,
            &Containment,
            ResultSink::memory(),
        )
        .unwrap();
        assert_eq!(rep.records.len(), 3);
        assert_eq!(rep.n_failed(), 0);
    }

    #[test]
    fn failures_are_recorded_and_run_continues() {
        struct Flaky;
        impl AnswerMetric for Flaky {
            fn kind(&self) -> MetricKind {
                MetricKind::Judge
            }
            fn score(&self, ex: &TqaExample, _: &str) -> Result<MetricScore, String> {
                if ex.id().ends_with('1') {
                    Err("endpoint down".into())
                } else {
                    Ok(MetricScore {
                        value: 0.5,
                        kind: MetricKind::Judge,
                    })
                }
            }
        }
        let (v, corpus) = setup(3);
        let rep = run_experiment(
            &v,
            &corpus,
            &[Method::Random],
            &quick(),
            &Flaky,
            ResultSink::memory(),
        )
        .unwrap();
        assert_eq!(rep.n_failed(), 1);
        let s = rep.summary(Method::Random).unwrap();
        assert_eq!((s.n, s.n_failed, s.complete()), (2, 1, false));
        assert_eq!(s.mean_attacked_score, Some(0.5));
        assert!(render_report(&rep, ReportFormat::Table).contains("0.500*"));
    }

    #[test]
    fn resume_after_crash_is_identical() {
        let (v, corpus) = setup(4);
        let methods = [
            Method::Random,
            Method::BestOfK(3),
            Method::atp(AttackMode::Joint),
        ];
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.jsonl");
        let rep = run_experiment(
            &v,
            &corpus,
            &methods,
            &quick(),
            &Containment,
            ResultSink::file(&full, false).unwrap(),
        )
        .unwrap();
        let full_bytes = fs::read(&full).unwrap();
        assert_eq!(full_bytes.iter().filter(|&&b| b == b'\n').count(), 12);

        // Keep five complete records plus half of the sixth.
        let lines: Vec<&[u8]> = full_bytes.split_inclusive(|&b| b == b'\n').collect();
        let mut crashed: Vec<u8> = lines[..5].concat();
        crashed.extend_from_slice(&lines[5][..lines[5].len() / 2]);
        let part = dir.path().join("part.jsonl");
        fs::write(&part, &crashed).unwrap();
        let resumed = run_experiment(
            &v,
            &corpus,
            &methods,
            &quick(),
            &Containment,
            ResultSink::file(&part, true).unwrap(),
        )
        .unwrap();
        assert_eq!(fs::read(&part).unwrap(), full_bytes);
        assert_eq!(resumed.records, rep.records);

        let (records, timings) = load_results(&full).unwrap();
        assert_eq!(records, rep.records);
        assert_eq!(timings.len(), 12);
    }

    #[test]
    fn resume_rejects_foreign_and_corrupt_files() {
        let (v, corpus) = setup(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        run_experiment(
            &v,
            &corpus,
            &[Method::Vanilla],
            &quick(),
            &Containment,
            ResultSink::file(&path, false).unwrap(),
        )
        .unwrap();
        let sink = ResultSink::file(&path, true).unwrap();
        let err = run_experiment(&v, &corpus, &[Method::Random], &quick(), &Containment, sink)
            .unwrap_err();
        assert!(matches!(err, ExperimentError::ForeignRecord { .. }));
        fs::write(&path, "garbage\n{}\n").unwrap();
        assert!(matches!(
            ResultSink::file(&path, true),
            Err(ExperimentError::Corrupt { line: 1, .. })
        ));
    }

    #[test]
    fn rendering() {
        let (v, corpus) = setup(2);
        let empty =
            ExperimentReport::new(&quick(), MetricKind::Containment, vec![], 0, vec![], &[]);
        assert_eq!(render_report(&empty, ReportFormat::Table), "victim\n");
        assert_eq!(render_report(&empty, ReportFormat::Csv).lines().count(), 1);

        let rep = run_experiment(
            &v,
            &corpus,
            &[Method::Vanilla, Method::Random],
            &quick(),
            &Containment,
            ResultSink::memory(),
        )
        .unwrap();
        let table = render_report(&rep, ReportFormat::Table);
        let header: Vec<&str> = table
            .lines()
            .next()
            .unwrap()
            .split(" | ")
            .map(str::trim)
            .collect();
        assert_eq!(header, ["victim", "vanilla", "random"]);
        assert_eq!(table.lines().count(), 2);
        assert_eq!(render_report(&rep, ReportFormat::Csv).lines().count(), 3);
        let json = render_report(&rep, ReportFormat::Json);
        assert_eq!(
            serde_json::from_str::<ExperimentReport>(&json).unwrap(),
            rep
        );
        assert!("xml".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn task_seeds_differ_by_example_and_method() {
        let a = task_seed(0, "t1", Method::Random);
        assert_ne!(a, task_seed(0, "t2", Method::Random));
        assert_ne!(a, task_seed(0, "t1", Method::BestOfK(20)));
        assert_ne!(a, task_seed(1, "t1", Method::Random));
        assert_eq!(a, task_seed(0, "t1", Method::Random));
    }

    #[test]
    fn evo_budget_is_recorded() {
        let (v, corpus) = setup(2);
        let rep = run_experiment(
            &v,
            &corpus,
            &[Method::Evolutionary],
            &quick(),
            &Containment,
            ResultSink::memory(),
        )
        .unwrap();
        assert_eq!(
            rep.summary(Method::Evolutionary).unwrap().mean_queries,
            Some(30.0)
        );
    }
}
