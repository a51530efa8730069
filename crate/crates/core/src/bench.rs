//! Dataset ingestion, bounded-concurrency evaluation with a resumable
//! per-record cache, scoring and reports.
//!
//! Datasets are JSONL, one [`BenchmarkRecord`] per line:
//!
//! ```json
//! {"id": "q1", "image": "images/q1.png", "question": "What is written on the sign?",
//!  "options": ["EXIT", "ENTER", "STOP", "GO"], "answer": "C",
//!  "task": "perception", "subtask": "OCR"}
//! ```
//!
//! Options are labeled `A`, `B`, ... by position. Relative image paths are
//! resolved against an image root, by default the dataset file's directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::backend::ChatBackend;
use crate::digest::sha256_hex;
use crate::imaging;
use crate::pipeline::{self, FallbackReason, Mode, PipelineConfig, PipelineTrace, Question, Stage};
use crate::protocol::{ChoiceLabel, MAX_OPTIONS};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Row order used by reports; other subtasks follow alphabetically.
pub const CANONICAL_SUBTASKS: [&str; 7] = ["OCR", "RS", "DT", "MO", "AD", "FSP", "FCP"];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("{} record(s) reference missing images: {}", .0.len(), format_missing(.0))]
    MissingImages(Vec<(String, PathBuf)>),
    #[error("trace `{0}` matches no record")]
    UnmatchedTrace(String),
    #[error("more than one trace for record `{0}`")]
    DuplicateTrace(String),
    #[error("summary schema mismatch: {0} vs {1}")]
    SchemaMismatch(u32, u32),
    #[error("parallelism must be >= 1")]
    Parallelism,
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
}

fn format_missing(items: &[(String, PathBuf)]) -> String {
    items
        .iter()
        .map(|(id, p)| format!("{id} ({})", p.display()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BenchError {
    BenchError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Perception,
    Reasoning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkRecord {
    pub id: String,
    pub image: PathBuf,
    pub question: String,
    /// Option texts; the first is `A`.
    pub options: Vec<String>,
    pub answer: ChoiceLabel,
    pub task: Task,
    pub subtask: String,
}

impl BenchmarkRecord {
    fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.question.trim().is_empty() {
            return Err(format!("record `{}` has an empty question", self.id));
        }
        if !(2..=MAX_OPTIONS).contains(&self.options.len()) {
            return Err(format!(
                "record `{}` has {} options; expected 2 to {MAX_OPTIONS}",
                self.id,
                self.options.len()
            ));
        }
        if self.answer.index() >= self.options.len() {
            return Err(format!(
                "record `{}` answer {} is not among its {} options",
                self.id,
                self.answer,
                self.options.len()
            ));
        }
        if self.subtask.trim().is_empty() {
            return Err(format!("record `{}` has an empty subtask", self.id));
        }
        Ok(())
    }
}

/// Loads and validates a JSONL dataset. Relative image paths are joined to
/// `image_root`, or to the dataset's directory when `None`. Every record with
/// a missing image is reported at once.
pub fn load_dataset(path: &Path, image_root: Option<&Path>) -> Result<Vec<BenchmarkRecord>, BenchError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let root = match image_root {
        Some(r) => r.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| BenchError::Schema { line: line_no, message };
        let mut rec: BenchmarkRecord = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        rec.check().map_err(schema)?;
        if !seen.insert(rec.id.clone()) {
            return Err(schema(format!("duplicate id `{}`", rec.id)));
        }
        if rec.image.is_relative() {
            rec.image = root.join(&rec.image);
        }
        records.push(rec);
    }
    let missing: Vec<_> = records
        .iter()
        .filter(|r| !r.image.is_file())
        .map(|r| (r.id.clone(), r.image.clone()))
        .collect();
    if !missing.is_empty() {
        return Err(BenchError::MissingImages(missing));
    }
    Ok(records)
}

/// Writes records as JSONL.
pub fn write_dataset(path: &Path, records: &[BenchmarkRecord]) -> Result<(), BenchError> {
    write_jsonl(path, records)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), BenchError> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| io_err(path, e))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<PipelineTrace>, BenchError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| BenchError::Schema {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

/// Per-record trace cache: `<dir>/<config_hash>/<sha256(record id)>.json`.
/// Files are written to a temporary name and renamed into place, so a
/// reader never sees a partial trace.
#[derive(Debug, Clone)]
pub struct TraceCache {
    dir: PathBuf,
}

impl TraceCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, config_hash: &str, id: &str) -> PathBuf {
        self.dir
            .join(config_hash)
            .join(format!("{}.json", &sha256_hex(&[id.as_bytes()])[..32]))
    }

    /// A cached trace, if present and keyed exactly by `(id, config_hash)`.
    pub fn get(&self, config_hash: &str, id: &str) -> Option<PipelineTrace> {
        let bytes = fs::read(self.path_for(config_hash, id)).ok()?;
        match serde_json::from_slice::<PipelineTrace>(&bytes) {
            Ok(t) if t.question_id == id && t.config_hash == config_hash && t.error.is_none() => Some(t),
            Ok(_) => None,
            Err(e) => {
                warn!(id, error = %e, "ignoring unreadable cache entry");
                None
            }
        }
    }

    pub fn put(&self, trace: &PipelineTrace) -> Result<(), BenchError> {
        let path = self.path_for(&trace.config_hash, &trace.question_id);
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
        serde_json::to_writer(&mut tmp, trace).map_err(|e| io_err(&path, e))?;
        tmp.flush().map_err(|e| io_err(&path, e))?;
        tmp.persist(&path).map_err(|e| io_err(&path, e.error))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct EvalOptions<'a> {
    /// Maximum records in flight.
    pub parallelism: usize,
    /// Where completed traces are persisted. `None` disables caching.
    pub cache_dir: Option<PathBuf>,
    /// Reuse traces already in the cache.
    pub resume: bool,
    /// When set, no new records are started; in-flight ones finish.
    pub cancel: Option<&'a AtomicBool>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// Traces for completed records, in record order.
    pub traces: Vec<PipelineTrace>,
    pub summary: EvalSummary,
    pub config_hash: String,
    /// Records answered from the cache.
    pub cached: usize,
    /// Records never started because of cancellation or a fatal error.
    pub skipped: usize,
    pub cancelled: bool,
    /// First error after which continuing is pointless (e.g. bad credentials).
    pub fatal: Option<String>,
}

/// Runs the pipeline over `records` with at most `opts.parallelism` records
/// in flight. Per-record failures are recorded in traces and never abort the
/// run; a fatal backend error stops new records from starting. Completed,
/// error-free traces are persisted as soon as they finish.
pub fn evaluate(
    records: &[BenchmarkRecord],
    cfg: &PipelineConfig,
    backend: &dyn ChatBackend,
    opts: &EvalOptions<'_>,
) -> Result<EvalOutcome, BenchError> {
    if opts.parallelism == 0 {
        return Err(BenchError::Parallelism);
    }
    cfg.validate().map_err(|e| BenchError::Config(e.to_string()))?;
    let started = Instant::now();
    let config_hash = cfg.config_hash(backend);
    let cache = opts.cache_dir.as_ref().map(TraceCache::new);
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let cached = AtomicUsize::new(0);
    let fatal: Mutex<Option<String>> = Mutex::new(None);
    let results: Mutex<Vec<Option<PipelineTrace>>> = Mutex::new(vec![None; records.len()]);
    let cancelled = || opts.cancel.is_some_and(|c| c.load(Ordering::SeqCst));
    info!(records = records.len(), parallelism = opts.parallelism, %config_hash, "evaluation started");

    let worker = || loop {
        if cancelled() || stop.load(Ordering::SeqCst) {
            break;
        }
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(record) = records.get(i) else { break };
        let hit = if opts.resume {
            cache.as_ref().and_then(|c| c.get(&config_hash, &record.id))
        } else {
            None
        };
        let trace = match hit {
            Some(t) => {
                cached.fetch_add(1, Ordering::SeqCst);
                debug!(id = %record.id, "cache hit");
                t
            }
            None => {
                let t = run_record(record, cfg, backend, &config_hash);
                if let Some(err) = &t.error {
                    if err.fatal {
                        stop.store(true, Ordering::SeqCst);
                        fatal.lock().expect("fatal lock").get_or_insert_with(|| err.message.clone());
                    }
                } else if let Some(c) = &cache {
                    if let Err(e) = c.put(&t) {
                        warn!(id = %record.id, error = %e, "could not persist trace");
                    }
                }
                t
            }
        };
        results.lock().expect("results lock")[i] = Some(trace);
    };

    let workers = opts.parallelism.min(records.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(worker);
        }
    });

    let traces: Vec<PipelineTrace> = results.into_inner().expect("results lock").into_iter().flatten().collect();
    let skipped = records.len() - traces.len();
    let mut summary = score(&traces, records)?;
    summary.timing.total_wall_time_secs = started.elapsed().as_secs_f64();
    Ok(EvalOutcome {
        traces,
        summary,
        config_hash,
        cached: cached.into_inner(),
        skipped,
        cancelled: cancelled(),
        fatal: fatal.into_inner().expect("fatal lock"),
    })
}

/// Loads the record's image and runs the pipeline. Image failures become
/// trace errors.
pub fn run_record(
    record: &BenchmarkRecord,
    cfg: &PipelineConfig,
    backend: &dyn ChatBackend,
    config_hash: &str,
) -> PipelineTrace {
    match imaging::load_image(&record.image) {
        Ok(img) => {
            let q = Question {
                id: &record.id,
                image: &img,
                question: &record.question,
                options: &record.options,
            };
            pipeline::run_with_hash(&q, cfg, backend, config_hash)
        }
        Err(e) => {
            let mut t = PipelineTrace::new(&record.id, cfg.mode, config_hash);
            t.error = Some(pipeline::TraceError {
                stage: Stage::Setup,
                message: e.to_string(),
                fatal: false,
            });
            t
        }
    }
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub prompt: u64,
    pub completion: u64,
    pub total: u64,
}

/// Wall-clock facts. Excluded from determinism comparisons.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_wall_time_secs: f64,
    pub total_backend_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub schema_version: u32,
    pub mode: Option<Mode>,
    pub config_hash: Option<String>,
    pub per_subtask: BTreeMap<String, SubtaskScore>,
    /// Correct over all scored records.
    pub avg: f64,
    /// Unweighted mean of per-subtask accuracies.
    pub avg_c: f64,
    pub total: usize,
    pub correct: usize,
    pub fallback_rate: f64,
    pub fallback_counts: BTreeMap<String, usize>,
    pub revision_rate: f64,
    /// Records that finished without a parseable final answer.
    pub unparsed_rate: f64,
    pub error_count: usize,
    pub backend_calls: usize,
    pub tokens: TokenTotals,
    pub timing: Timing,
}

impl EvalSummary {
    /// Copy with wall-clock fields zeroed, for byte-level comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: Timing::default(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, BenchError> {
        serde_json::from_str(s).map_err(|e| BenchError::Schema {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

fn fallback_key(r: FallbackReason) -> &'static str {
    match r {
        FallbackReason::NoBbox => "no_bbox",
        FallbackReason::CropFailed => "crop_failed",
        FallbackReason::Stage2Unparsed => "stage2_unparsed",
    }
}

fn rate(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Tallies traces against their records. A record is correct iff the
/// trace's final answer equals the ground truth; unparsed and errored
/// records count as incorrect.
pub fn score(traces: &[PipelineTrace], records: &[BenchmarkRecord]) -> Result<EvalSummary, BenchError> {
    let by_id: HashMap<&str, &BenchmarkRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut seen = HashSet::new();
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut fallback_counts: BTreeMap<String, usize> = BTreeMap::new();
    let (mut correct, mut fallbacks, mut revised, mut unparsed, mut errors, mut calls) = (0, 0, 0, 0, 0, 0);
    let mut tokens = TokenTotals::default();
    let mut latency = 0.0;
    for t in traces {
        let rec = by_id
            .get(t.question_id.as_str())
            .ok_or_else(|| BenchError::UnmatchedTrace(t.question_id.clone()))?;
        if !seen.insert(t.question_id.as_str()) {
            return Err(BenchError::DuplicateTrace(t.question_id.clone()));
        }
        let ok = t.error.is_none() && t.final_answer == Some(rec.answer);
        let entry = per.entry(rec.subtask.clone()).or_default();
        entry.1 += 1;
        if ok {
            entry.0 += 1;
            correct += 1;
        }
        if let Some(r) = t.fallback_reason {
            fallbacks += 1;
            *fallback_counts.entry(fallback_key(r).to_string()).or_default() += 1;
        }
        revised += usize::from(t.revised);
        if t.error.is_some() {
            errors += 1;
        } else if t.final_answer.is_none() {
            unparsed += 1;
        }
        calls += t.backend_calls();
        tokens.prompt += t.prompt_tokens();
        tokens.completion += t.completion_tokens();
        latency += t.latency_ms();
    }
    tokens.total = tokens.prompt + tokens.completion;
    let total = traces.len();
    let per_subtask: BTreeMap<String, SubtaskScore> = per
        .into_iter()
        .map(|(k, (c, n))| {
            (
                k,
                SubtaskScore {
                    correct: c,
                    total: n,
                    accuracy: rate(c, n),
                },
            )
        })
        .collect();
    let avg_c = if per_subtask.is_empty() {
        0.0
    } else {
        per_subtask.values().map(|s| s.accuracy).sum::<f64>() / per_subtask.len() as f64
    };
    let mode = traces
        .first()
        .map(|t| t.mode)
        .filter(|m| traces.iter().all(|t| t.mode == *m));
    let config_hash = traces
        .first()
        .map(|t| t.config_hash.clone())
        .filter(|h| traces.iter().all(|t| &t.config_hash == h));
    Ok(EvalSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        mode,
        config_hash,
        per_subtask,
        avg: rate(correct, total),
        avg_c,
        total,
        correct,
        fallback_rate: rate(fallbacks, total),
        fallback_counts,
        revision_rate: rate(revised, total),
        unparsed_rate: rate(unparsed, total),
        error_count: errors,
        backend_calls: calls,
        tokens,
        timing: Timing {
            total_wall_time_secs: 0.0,
            total_backend_latency_ms: latency,
        },
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Text,
    Json,
    Markdown,
}

/// Subtask names in report order.
pub fn ordered_subtasks<'a>(names: impl IntoIterator<Item = &'a String>) -> Vec<&'a str> {
    let mut names: Vec<&str> = names.into_iter().map(String::as_str).collect();
    names.sort_by_key(|n| {
        (
            CANONICAL_SUBTASKS.iter().position(|c| c == n).unwrap_or(usize::MAX),
            n.to_string(),
        )
    });
    names.dedup();
    names
}

fn cost_line(s: &EvalSummary) -> String {
    format!(
        "Backend calls: {}; tokens: {} prompt + {} completion = {}; wall time: {:.1} s; backend latency: {:.1} s",
        s.backend_calls,
        s.tokens.prompt,
        s.tokens.completion,
        s.tokens.total,
        s.timing.total_wall_time_secs,
        s.timing.total_backend_latency_ms / 1e3
    )
}

fn rates_line(s: &EvalSummary) -> String {
    format!(
        "Fallback rate: {:.3}; revision rate: {:.3}; unparsed rate: {:.3}; errors: {}",
        s.fallback_rate, s.revision_rate, s.unparsed_rate, s.error_count
    )
}

/// Renders a summary. Deterministic for a given summary.
pub fn report(summary: &EvalSummary, format: ReportFormat) -> String {
    let rows = ordered_subtasks(summary.per_subtask.keys());
    let mut out = String::new();
    match format {
        ReportFormat::Json => out = summary.to_json() + "\n",
        ReportFormat::Markdown => {
            if let Some(mode) = summary.mode {
                let _ = writeln!(out, "Mode: {mode}\n");
            }
            out.push_str("| Subtask | Accuracy | Correct | Total |\n|---|---:|---:|---:|\n");
            for name in rows {
                let s = &summary.per_subtask[name];
                let _ = writeln!(out, "| {name} | {:.3} | {} | {} |", s.accuracy, s.correct, s.total);
            }
            let _ = writeln!(out, "| Avg | {:.3} | {} | {} |", summary.avg, summary.correct, summary.total);
            let _ = writeln!(out, "| Avg-C | {:.3} |  |  |", summary.avg_c);
            let _ = writeln!(out, "\n{}\n\n{}", rates_line(summary), cost_line(summary));
        }
        ReportFormat::Text => {
            let width = rows.iter().map(|r| r.len()).max().unwrap_or(0).max(7);
            if let Some(mode) = summary.mode {
                let _ = writeln!(out, "mode: {mode}");
            }
            for name in rows {
                let s = &summary.per_subtask[name];
                let _ = writeln!(out, "{name:<width$}  {:.3}  ({}/{})", s.accuracy, s.correct, s.total);
            }
            let _ = writeln!(out, "{:<width$}  {:.3}  ({}/{})", "Avg", summary.avg, summary.correct, summary.total);
            let _ = writeln!(out, "{:<width$}  {:.3}", "Avg-C", summary.avg_c);
            let _ = writeln!(out, "{}\n{}", rates_line(summary), cost_line(summary));
        }
    }
    out
}

fn signed(v: f64) -> String {
    // Avoid printing "-0.000" for tiny negative differences.
    let v = if v.abs() < 5e-4 { 0.0 } else { v };
    format!("{v:+.3}")
}

/// Markdown delta table, `ours - baseline`, per subtask and for Avg and
/// Avg-C. Subtasks present in only one summary show `n/a`.
pub fn compare(ours: &EvalSummary, baseline: &EvalSummary) -> Result<String, BenchError> {
    if ours.schema_version != baseline.schema_version {
        return Err(BenchError::SchemaMismatch(ours.schema_version, baseline.schema_version));
    }
    let rows = ordered_subtasks(ours.per_subtask.keys().chain(baseline.per_subtask.keys()));
    let mut out = String::from("| Subtask | Baseline | Ours | Delta |\n|---|---:|---:|---:|\n");
    let cell = |s: Option<f64>| s.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
    let mut row = |name: &str, b: Option<f64>, o: Option<f64>| {
        let delta = match (b, o) {
            (Some(b), Some(o)) => signed(o - b),
            _ => "n/a".to_string(),
        };
        let _ = writeln!(out, "| {name} | {} | {} | {delta} |", cell(b), cell(o));
    };
    for name in rows {
        row(
            name,
            baseline.per_subtask.get(name).map(|s| s.accuracy),
            ours.per_subtask.get(name).map(|s| s.accuracy),
        );
    }
    row("Avg", Some(baseline.avg), Some(ours.avg));
    row("Avg-C", Some(baseline.avg_c), Some(ours.avg_c));
    let _ = writeln!(
        out,
        "\nBackend calls: {} vs {}; tokens: {} vs {}; wall time: {:.1} s vs {:.1} s",
        baseline.backend_calls,
        ours.backend_calls,
        baseline.tokens.total,
        ours.tokens.total,
        baseline.timing.total_wall_time_secs,
        ours.timing.total_wall_time_secs
    );
    Ok(out)
}
