//! `zoomrefine`: run the zoom-refine pipeline on one question, evaluate it
//! over a dataset, compare summaries, and generate or serve mock scenes.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing::info;
use zoomrefine_core::backend::{HttpBackend, WireServer};
use zoomrefine_core::bench::{self, EvalOptions, EvalSummary, ReportFormat};
use zoomrefine_core::imaging;
use zoomrefine_core::mockworld::{self, DatasetParams, OracleBackend, SceneRegistry, WrongAnswerPolicy};
use zoomrefine_core::pipeline::{self, Mode, PipelineTrace, Question};
use zoomrefine_core::protocol::DEFAULT_TEMPLATE_FILE;
use zoomrefine_core::{ChatBackend, Execution};

use config::{BackendKind, RunConfigFile};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_DATASET: u8 = 4;
pub const EXIT_BACKEND: u8 = 5;
pub const EXIT_INTERRUPTED: u8 = 130;

/// A command failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(m: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, m)
    }

    pub fn config(m: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, m)
    }

    pub fn dataset(m: impl Into<String>) -> Self {
        Self::new(EXIT_DATASET, m)
    }

    pub fn backend(m: impl Into<String>) -> Self {
        Self::new(EXIT_BACKEND, m)
    }
}

type CmdResult = Result<ExitCode, Failure>;

#[derive(Parser)]
#[command(name = "zoomrefine", version, about = "Localized zoom and self-refinement for high-resolution visual QA")]
struct Cli {
    /// TOML run configuration. Flags override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// More logging (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer one question about one image and print the trace.
    Run(RunArgs),
    /// Evaluate a dataset; writes traces, a summary and a report.
    Eval(EvalArgs),
    /// Render a summary, or compare two summaries.
    Report(ReportArgs),
    /// Configuration utilities.
    #[command(subcommand)]
    Config(ConfigCmd),
    /// Synthetic scenes and the oracle model.
    #[command(subcommand)]
    Mock(MockCmd),
}

#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long, value_enum)]
    mode: Option<CliMode>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Chat-completions base URL (for the http backend).
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Ground-truth scenes file (for the oracle backend).
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Template file replacing the built-in prompts.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliMode {
    Baseline,
    ZoomRefine,
}

impl From<CliMode> for Mode {
    fn from(m: CliMode) -> Self {
        match m {
            CliMode::Baseline => Mode::Baseline,
            CliMode::ZoomRefine => Mode::ZoomRefine,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    question: String,
    /// Answer option text; repeat in order (A, B, ...).
    #[arg(long = "option", required = true)]
    options: Vec<String>,
    /// Question id; defaults to the image file stem.
    #[arg(long)]
    id: Option<String>,
    /// Print the trace as JSON.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    image_root: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Reuse completed traces from the cache.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Output directory; results go to `<out>/<mode>/`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ReportArgs {
    /// Summary JSON written by `eval`.
    summary: PathBuf,
    /// Baseline summary; prints a delta table (summary minus baseline).
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    format: CliFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliFormat {
    Text,
    Json,
    Markdown,
}

#[derive(Subcommand)]
enum ConfigCmd {
    /// Print the effective configuration (defaults plus file) as TOML.
    Show {
        /// Print the prompt template file instead.
        #[arg(long)]
        templates: bool,
    },
}

#[derive(Subcommand)]
enum MockCmd {
    /// Generate scenes: images/, dataset.jsonl and scenes.jsonl.
    Gen(GenArgs),
    /// Serve the oracle over the chat-completions wire contract.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Scenes using the small target size; they come first.
    #[arg(long)]
    small_count: Option<usize>,
    #[arg(long, default_value_t = 4096)]
    canvas: u32,
    #[arg(long, default_value_t = 24)]
    small_px: u32,
    #[arg(long, default_value_t = 64)]
    large_px: u32,
    #[arg(long, default_value_t = 24)]
    distractors: u32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8000")]
    addr: String,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// Environment variable holding the key clients must present.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    no_bbox_probability: Option<f64>,
    #[arg(long)]
    bbox_noise: Option<f64>,
    #[arg(long, value_enum)]
    wrong_answer_policy: Option<CliPolicy>,
    #[arg(long)]
    legibility_threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliPolicy {
    FixedOffset,
    SeededRandom,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let result = (|| {
        let file = match &cli.config {
            Some(p) => RunConfigFile::load(p)?,
            None => RunConfigFile::default(),
        };
        match cli.command {
            Command::Run(args) => cmd_run(file, args),
            Command::Eval(args) => cmd_eval(file, args),
            Command::Report(args) => cmd_report(args),
            Command::Config(ConfigCmd::Show { templates }) => cmd_config_show(&file, templates),
            Command::Mock(MockCmd::Gen(args)) => cmd_mock_gen(args),
            Command::Mock(MockCmd::Serve(args)) => cmd_mock_serve(file, args),
        }
    })();
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn apply(file: &mut RunConfigFile, o: &Overrides) {
    if let Some(m) = o.mode {
        file.mode = m.into();
    }
    if let Some(b) = o.backend {
        file.backend_kind = b;
    }
    if let Some(e) = &o.endpoint {
        file.backend.endpoint_url = e.clone();
    }
    if let Some(m) = &o.model {
        file.backend.model_name = m.clone();
    }
    if let Some(s) = &o.scenes {
        file.oracle_scenes = Some(s.clone());
    }
    if let Some(t) = &o.templates {
        file.templates = Some(t.clone());
    }
}

fn build_backend(file: &RunConfigFile) -> Result<Arc<dyn ChatBackend>, Failure> {
    match file.backend_kind {
        BackendKind::Http => {
            let b = HttpBackend::new(file.backend.clone()).map_err(|e| Failure::config(e.to_string()))?;
            Ok(Arc::new(b))
        }
        BackendKind::Oracle => Ok(Arc::new(build_oracle(file)?)),
    }
}

fn build_oracle(file: &RunConfigFile) -> Result<OracleBackend, Failure> {
    let path = file
        .oracle_scenes
        .as_ref()
        .ok_or_else(|| Failure::config("the oracle backend needs `oracle_scenes` (or --scenes)"))?;
    let registry = SceneRegistry::load(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    OracleBackend::new(file.oracle.clone(), registry).map_err(|e| Failure::config(e.to_string()))
}

fn cmd_run(mut file: RunConfigFile, args: RunArgs) -> CmdResult {
    apply(&mut file, &args.overrides);
    if !args.image.is_file() {
        return Err(Failure::usage(format!("image not found: {}", args.image.display())));
    }
    let cfg = file.pipeline_config()?;
    let backend = build_backend(&file)?;
    let config_hash = cfg.config_hash(&*backend);
    eprintln!("config hash: {config_hash}");
    let image = imaging::load_image(&args.image).map_err(|e| Failure::usage(e.to_string()))?;
    let id = args.id.clone().unwrap_or_else(|| {
        args.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "query".into())
    });
    let q = Question {
        id: &id,
        image: &image,
        question: &args.question,
        options: &args.options,
    };
    let trace = pipeline::run_with_hash(&q, &cfg, &*backend, &config_hash);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&trace).expect("trace serializes"));
    } else {
        print_trace(&trace, &args.options);
    }
    match &trace.error {
        None => Ok(ExitCode::SUCCESS),
        Some(e) if e.stage == pipeline::Stage::Setup => Err(Failure::usage(e.message.clone())),
        Some(e) => Err(Failure::backend(e.message.clone())),
    }
}

fn print_trace(t: &PipelineTrace, options: &[String]) {
    let label = |a: Option<zoomrefine_core::ChoiceLabel>| match a {
        Some(l) => format!("({l}) {}", options.get(l.index()).map(String::as_str).unwrap_or("")),
        None => "unparsed".to_string(),
    };
    println!("mode: {}", t.mode);
    println!(
        "image: {}x{} (downsampled {}x{})",
        t.original_width, t.original_height, t.downsampled_width, t.downsampled_height
    );
    if let Some(s1) = &t.stage1 {
        let name = if t.mode == Mode::Baseline { "answer" } else { "initial answer" };
        println!("{name}: {}", label(s1.answer));
    }
    if t.mode == Mode::ZoomRefine {
        match &t.bbox {
            Some(b) => println!(
                "bbox: {}{}",
                zoomrefine_core::protocol::format_bbox(b),
                if t.bbox_repaired { " (repaired)" } else { "" }
            ),
            None => println!("bbox: none"),
        }
        if let (Some(r), Some(c)) = (t.pixel_rect, t.crop_rect) {
            println!("box on original: {r}");
            println!("crop: {c}");
        }
        if let (Some(w), Some(h)) = (t.crop_presented_width, t.crop_presented_height) {
            println!("crop presented: {w}x{h}{}", if t.crop_resized { " (resized)" } else { "" });
        }
        if let Some(s2) = &t.stage2 {
            println!("refined answer: {}", label(s2.answer));
        }
        if let Some(f) = t.fallback_reason {
            println!("fallback: {}", serde_json::to_value(f).expect("serializes").as_str().unwrap_or(""));
        }
    }
    println!("final answer: {}", label(t.final_answer));
    if t.mode == Mode::ZoomRefine {
        println!("revised: {}", t.revised);
    }
    if let Some(e) = &t.error {
        println!("error: {}", e.message);
    }
}

fn cmd_eval(mut file: RunConfigFile, args: EvalArgs) -> CmdResult {
    apply(&mut file, &args.overrides);
    if let Some(d) = args.dataset {
        file.dataset = Some(d);
    }
    if let Some(r) = args.image_root {
        file.image_root = Some(r);
    }
    if let Some(p) = args.parallelism {
        file.parallelism = p;
    }
    if let Some(c) = args.cache_dir {
        file.cache_dir = c;
    }
    if let Some(o) = args.out {
        file.output_dir = o;
    }
    if file.parallelism == 0 {
        return Err(Failure::usage("--parallelism must be >= 1"));
    }
    let dataset = file
        .dataset
        .clone()
        .ok_or_else(|| Failure::usage("no dataset given (--dataset or `dataset` in the config file)"))?;
    let cfg = file.pipeline_config()?;
    let backend = build_backend(&file)?;
    let records = bench::load_dataset(&dataset, file.image_root.as_deref())
        .map_err(|e| Failure::dataset(format!("{}: {e}", dataset.display())))?;
    let config_hash = cfg.config_hash(&*backend);
    eprintln!("config hash: {config_hash}");

    let cancel = Arc::new(AtomicBool::new(false));
    {
        let cancel = cancel.clone();
        // A second handler registration fails only if one already exists.
        let _ = ctrlc::set_handler(move || {
            if cancel.swap(true, Ordering::SeqCst) {
                std::process::exit(EXIT_INTERRUPTED as i32);
            }
            eprintln!("interrupt: finishing in-flight records; interrupt again to abort");
        });
    }
    let opts = EvalOptions {
        parallelism: file.parallelism,
        cache_dir: Some(file.cache_dir.clone()),
        resume: args.resume,
        cancel: Some(&*cancel),
    };
    let outcome = bench::evaluate(&records, &cfg, &*backend, &opts).map_err(|e| Failure::config(e.to_string()))?;
    info!(cached = outcome.cached, skipped = outcome.skipped, "evaluation finished");

    let out_dir = file.output_dir.join(cfg.mode.to_string());
    write_results(&out_dir, &outcome.traces, &outcome.summary)?;
    print!("{}", bench::report(&outcome.summary, ReportFormat::Text));
    eprintln!(
        "{} record(s) evaluated, {} from cache, {} not started; results in {}",
        outcome.traces.len(),
        outcome.cached,
        outcome.skipped,
        out_dir.display()
    );
    if let Some(msg) = outcome.fatal {
        return Err(Failure::backend(format!("stopped after a fatal backend error: {msg}")));
    }
    if outcome.cancelled && outcome.skipped > 0 {
        eprintln!("interrupted; rerun with --resume to continue");
        return Ok(ExitCode::from(EXIT_INTERRUPTED));
    }
    let s = &outcome.summary;
    if s.total > 0 && s.error_count == s.total {
        return Err(Failure::backend("every record failed; see traces for details"));
    }
    Ok(ExitCode::SUCCESS)
}

fn write_results(dir: &Path, traces: &[PipelineTrace], summary: &EvalSummary) -> Result<(), Failure> {
    let io = |p: &Path, e: &dyn std::fmt::Display| Failure::config(format!("{}: {e}", p.display()));
    fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
    bench::write_jsonl(&dir.join("traces.jsonl"), traces).map_err(|e| Failure::config(e.to_string()))?;
    let summary_path = dir.join("summary.json");
    fs::write(&summary_path, summary.to_json() + "\n").map_err(|e| io(&summary_path, &e))?;
    let report_path = dir.join("report.md");
    fs::write(&report_path, bench::report(summary, ReportFormat::Markdown)).map_err(|e| io(&report_path, &e))?;
    Ok(())
}

fn read_summary(path: &Path) -> Result<EvalSummary, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    EvalSummary::from_json(&text).map_err(|e| Failure::dataset(format!("{}: {e}", path.display())))
}

fn cmd_report(args: ReportArgs) -> CmdResult {
    let ours = read_summary(&args.summary)?;
    let text = match &args.baseline {
        Some(b) => {
            let base = read_summary(b)?;
            bench::compare(&ours, &base).map_err(|e| Failure::dataset(e.to_string()))?
        }
        None => bench::report(
            &ours,
            match args.format {
                CliFormat::Text => ReportFormat::Text,
                CliFormat::Json => ReportFormat::Json,
                CliFormat::Markdown => ReportFormat::Markdown,
            },
        ),
    };
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_config_show(file: &RunConfigFile, templates: bool) -> CmdResult {
    if templates {
        match &file.templates {
            Some(p) => {
                let t = zoomrefine_core::PromptTemplates::load(p).map_err(|e| Failure::config(e.to_string()))?;
                print!("{}", t.to_file_string());
            }
            None => print!("{DEFAULT_TEMPLATE_FILE}"),
        }
    } else {
        print!("{}", file.to_toml());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_mock_gen(args: GenArgs) -> CmdResult {
    let params = DatasetParams {
        count: args.count,
        small_count: args.small_count.unwrap_or(args.count / 2),
        canvas_side: args.canvas,
        small_target_px: args.small_px,
        large_target_px: args.large_px,
        distractor_count: args.distractors,
        seed: args.seed,
    };
    let ds = mockworld::generate_dataset(&args.out, &params, Execution::default())
        .map_err(|e| Failure::usage(e.to_string()))?;
    println!(
        "wrote {} scenes to {} ({}, {})",
        ds.records.len(),
        ds.root.display(),
        ds.dataset_path.display(),
        ds.scenes_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_mock_serve(mut file: RunConfigFile, args: ServeArgs) -> CmdResult {
    if let Some(s) = args.scenes {
        file.oracle_scenes = Some(s);
    }
    let o = &mut file.oracle;
    if let Some(p) = args.no_bbox_probability {
        o.no_bbox_probability = p;
    }
    if let Some(n) = args.bbox_noise {
        o.bbox_noise = n;
    }
    if let Some(p) = args.wrong_answer_policy {
        o.wrong_answer_policy = match p {
            CliPolicy::FixedOffset => WrongAnswerPolicy::FixedOffset,
            CliPolicy::SeededRandom => WrongAnswerPolicy::SeededRandom,
        };
    }
    if let Some(t) = args.legibility_threshold {
        o.legibility_threshold_px = t;
    }
    if let Some(s) = args.seed {
        o.seed = s;
    }
    let oracle = build_oracle(&file)?;
    let api_key = match &args.api_key_env {
        Some(var) => Some(std::env::var(var).map_err(|_| Failure::config(format!("{var} is not set")))?),
        None => None,
    };
    let server = WireServer::start(&args.addr, Arc::new(oracle), api_key, args.threads)
        .map_err(|e| Failure::config(e.to_string()))?;
    println!("listening on {}", server.base_url());
    let _ = std::io::stdout().flush();
    let _ = ctrlc::set_handler(|| std::process::exit(0));
    server.wait();
    Ok(ExitCode::SUCCESS)
}
