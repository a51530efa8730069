//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and fails
//! if any criterion fails. Run with
//! `cargo test -p zoomrefine-cli --test acceptance`.

use std::collections::{BTreeMap, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zoomrefine_core::backend::{CountingBackend, WireServer};
use zoomrefine_core::bench::{self, BenchmarkRecord, EvalOptions, EvalSummary, Task};
use zoomrefine_core::exec::{self, Execution};
use zoomrefine_core::imaging::{self, CropPolicy, Image, NormBBox};
use zoomrefine_core::mockworld::{generate_dataset, DatasetParams, GeneratedDataset, OracleBackend, OracleConfig, SceneRegistry};
use zoomrefine_core::pipeline::{FallbackReason, Mode, PipelineConfig, PipelineTrace, Stage, TraceError};
use zoomrefine_core::protocol::{format_bbox, label_options, parse_choice, parse_zoom_reply, ChoiceLabel};
use zoomrefine_core::{BackendError, ChatBackend, Conversation, ModelReply};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        // Written as a negation so a NaN comparison fails the check.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Presented glyph height below which the oracle cannot read the target.
const LEGIBILITY_PX: f64 = 12.0;
const CANVAS: u32 = 2048;
const SMALL_PX: u32 = 16;
const LARGE_PX: u32 = 32;

fn dataset(root: &Path, count: usize, small: usize, seed: u64) -> GeneratedDataset {
    let params = DatasetParams {
        count,
        small_count: small,
        canvas_side: CANVAS,
        small_target_px: SMALL_PX,
        large_target_px: LARGE_PX,
        distractor_count: 24,
        seed,
    };
    generate_dataset(root, &params, Execution::default()).expect("dataset generation")
}

fn oracle(ds: &GeneratedDataset, cfg: OracleConfig) -> OracleBackend {
    OracleBackend::new(cfg, SceneRegistry::new(ds.scenes.clone())).expect("oracle config")
}

fn cfg(mode: Mode) -> PipelineConfig {
    PipelineConfig {
        mode,
        ..PipelineConfig::default()
    }
}

fn run(
    records: &[BenchmarkRecord],
    mode: Mode,
    backend: &dyn ChatBackend,
    parallelism: usize,
) -> Result<bench::EvalOutcome, String> {
    let opts = EvalOptions {
        parallelism,
        ..Default::default()
    };
    bench::evaluate(records, &cfg(mode), backend, &opts).map_err(|e| e.to_string())
}

fn summary_bytes(s: &EvalSummary) -> Vec<u8> {
    serde_json::to_vec(&s.without_timing()).expect("summary serializes")
}

// ---------------------------------------------------------------------------
// 1 and 7: mechanism reproduction and cost accounting
// ---------------------------------------------------------------------------

struct MechanismRun {
    baseline_calls: usize,
    zoom_calls: usize,
    records: usize,
    zoom_fallbacks: f64,
    trace_calls: (usize, usize),
}

/// Accuracy the baseline must reach, from the scene list alone: the
/// downsampled view scales a square canvas by `1024 / canvas`, a glyph is
/// read iff its scaled height reaches the legibility threshold, and with
/// the fixed-offset policy an unreadable glyph is never answered correctly.
fn closed_form_baseline(ds: &GeneratedDataset) -> (usize, f64) {
    let legible = ds
        .scenes
        .iter()
        .filter(|s| s.target_size_px as f64 * (1024.0 / s.canvas_side as f64) >= LEGIBILITY_PX)
        .count();
    let chance_on_illegible = 0.0;
    let expected = (legible as f64 + chance_on_illegible * (ds.scenes.len() - legible) as f64) / ds.scenes.len() as f64;
    (legible, expected)
}

fn c1_mechanism(ds: &GeneratedDataset, started: Instant, out: &mut Option<MechanismRun>) -> Check {
    let records = bench::load_dataset(&ds.dataset_path, None).map_err(|e| e.to_string())?;
    ensure!(records.len() == 200, "expected 200 records, got {}", records.len());
    let backend = CountingBackend::new(oracle(ds, OracleConfig::default()));
    let base = run(&records, Mode::Baseline, &backend, 1)?;
    let baseline_calls = backend.calls();
    backend.reset();
    let zoom = run(&records, Mode::ZoomRefine, &backend, 1)?;
    let zoom_calls = backend.calls();
    let elapsed = started.elapsed();

    let (legible, expected) = closed_form_baseline(ds);
    *out = Some(MechanismRun {
        baseline_calls,
        zoom_calls,
        records: records.len(),
        zoom_fallbacks: zoom.summary.fallback_rate,
        trace_calls: (
            base.traces.iter().map(PipelineTrace::backend_calls).sum(),
            zoom.traces.iter().map(PipelineTrace::backend_calls).sum(),
        ),
    });
    ensure!(legible == 100, "closed form found {legible} legible scenes, expected 100");
    ensure!(
        base.summary.avg == expected,
        "baseline {:.6} != closed form {:.6}",
        base.summary.avg,
        expected
    );
    ensure!(zoom.summary.avg == 1.0, "zoom-refine {:.6} != 1.0", zoom.summary.avg);
    ensure!(elapsed < Duration::from_secs(120), "took {:.1} s", elapsed.as_secs_f64());
    Ok(format!(
        "baseline {:.3} (closed form {:.3}), zoom-refine {:.3}, {:.1} s",
        base.summary.avg,
        expected,
        zoom.summary.avg,
        elapsed.as_secs_f64()
    ))
}

fn c7_cost(m: &Option<MechanismRun>) -> Check {
    let m = m.as_ref().ok_or("mechanism run did not complete")?;
    let n = m.records;
    ensure!(m.zoom_fallbacks == 0.0, "zoom run had fallback rate {}", m.zoom_fallbacks);
    ensure!(m.zoom_calls == 2 * n, "zoom-refine made {} calls for {n} records", m.zoom_calls);
    ensure!(m.baseline_calls == n, "baseline made {} calls for {n} records", m.baseline_calls);
    ensure!(
        m.trace_calls == (n, 2 * n),
        "traces record {:?} calls, backend saw ({}, {})",
        m.trace_calls,
        m.baseline_calls,
        m.zoom_calls
    );
    Ok(format!("N = {n}: baseline {} calls, zoom-refine {} calls", m.baseline_calls, m.zoom_calls))
}

// ---------------------------------------------------------------------------
// 2: degradation robustness
// ---------------------------------------------------------------------------

fn c2_degradation(root: &Path) -> Check {
    let started = Instant::now();
    let ds = dataset(&root.join("c2"), 500, 250, 77);
    let records = bench::load_dataset(&ds.dataset_path, None).map_err(|e| e.to_string())?;
    let backend = oracle(
        &ds,
        OracleConfig {
            no_bbox_probability: 0.2,
            seed: 5,
            ..OracleConfig::default()
        },
    );
    let base = run(&records, Mode::Baseline, &backend, 1)?;
    let zoom = run(&records, Mode::ZoomRefine, &backend, 1)?;
    let elapsed = started.elapsed();
    let s = &zoom.summary;
    let no_bbox = s.fallback_counts.get("no_bbox").copied().unwrap_or(0);
    ensure!(
        (0.15..=0.25).contains(&s.fallback_rate),
        "fallback rate {:.3} outside 0.2 +/- 0.05",
        s.fallback_rate
    );
    ensure!(no_bbox == s.fallback_counts.values().sum::<usize>(), "unexpected fallback kinds {:?}", s.fallback_counts);
    ensure!(s.avg >= base.summary.avg, "zoom-refine {:.3} < baseline {:.3}", s.avg, base.summary.avg);
    ensure!(elapsed < Duration::from_secs(300), "took {:.1} s", elapsed.as_secs_f64());
    Ok(format!(
        "fallback rate {:.3}, zoom-refine {:.3} >= baseline {:.3}, {:.1} s",
        s.fallback_rate,
        s.avg,
        base.summary.avg,
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 3: geometry
// ---------------------------------------------------------------------------

fn random_pixels(rng: &mut ChaCha8Rng, w: u32, h: u32, c: u8) -> Image {
    let mut px = vec![0u8; w as usize * h as usize * c as usize];
    rng.fill(&mut px[..]);
    Image::new(w, h, c, px).expect("sized buffer")
}

fn geometry_case(i: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e0 + i as u64);
    let small = rng.random_bool(0.7);
    let (w, h) = if small {
        (rng.random_range(1..=96u32), rng.random_range(1..=96u32))
    } else {
        (rng.random_range(1..=6000u32), rng.random_range(1..=6000u32))
    };
    let mut raw: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
    if rng.random_bool(0.15) {
        raw[2] = raw[0]; // zero width
    }
    if rng.random_bool(0.15) {
        raw[3] = raw[1]; // zero height
    }
    if rng.random_bool(0.05) {
        raw = [0.0, 0.0, 1.0, 1.0];
    }
    let (b, _) = NormBBox::repair(raw).ok_or_else(|| format!("repair rejected {raw:?}"))?;
    let max_side = rng.random_range(1..=4096u32);
    let policy = CropPolicy {
        expansion_factor: rng.random_range(1.0..4.0),
        min_side_px: rng.random_range(0..=max_side.min(1024)),
        max_side_px: max_side,
    };
    let ctx = || format!("case {i}: {w}x{h} box {b:?} policy {policy:?}");

    let r = imaging::denormalize_dims(&b, w, h);
    ensure!(r.is_valid_for(w, h) && r.width() >= 1 && r.height() >= 1, "{}: pixel rect {r}", ctx());
    let e = imaging::expand_and_clamp_dims(&r, &policy, w, h);
    ensure!(e.is_valid_for(w, h), "{}: crop {e} out of bounds", ctx());
    ensure!(e.contains(&r), "{}: crop {e} drops {r}", ctx());
    let (cx, cy) = r.center();
    ensure!(e.contains_point(cx, cy), "{}: crop {e} misses center", ctx());
    // The box's own center, before pixel rounding, is within half a pixel.
    let (bx, by) = ((b.x1 + b.x2) / 2.0 * w as f64, (b.y1 + b.y2) / 2.0 * h as f64);
    ensure!(
        bx >= e.left as f64 - 0.5 && bx <= e.right as f64 + 0.5 && by >= e.top as f64 - 0.5 && by <= e.bottom as f64 + 0.5,
        "{}: crop {e} misses box center ({bx}, {by})",
        ctx()
    );
    ensure!(
        e.width() >= policy.min_side_px.min(w) && e.height() >= policy.min_side_px.min(h),
        "{}: crop {e} below minimum side",
        ctx()
    );

    if small {
        let channels = [1u8, 3, 4][rng.random_range(0..3)];
        let img = random_pixels(&mut rng, w, h, channels);
        let crop = imaging::crop(&img, &e).map_err(|err| format!("{}: crop errored: {err}", ctx()))?;
        for y in 0..e.height() {
            for x in 0..e.width() {
                ensure!(
                    crop.pixel(x, y) == img.pixel(e.left + x, e.top + y),
                    "{}: pixel ({x}, {y}) differs",
                    ctx()
                );
            }
        }
        let full = imaging::denormalize(&NormBBox::full(), &img);
        let whole = imaging::crop(&img, &full).map_err(|err| format!("{}: full crop errored: {err}", ctx()))?;
        ensure!(
            whole.pixels() == img.pixels() && (whole.width(), whole.height()) == (w, h),
            "{}: full-box crop is not pixel-identical",
            ctx()
        );
    }
    Ok(())
}

fn c3_geometry() -> Check {
    let started = Instant::now();
    let n = 10_000;
    let failures: Vec<String> = exec::map_range(Execution::default(), n, |i| {
        panic::catch_unwind(|| geometry_case(i)).unwrap_or_else(|_| Err(format!("case {i} panicked")))
    })
    .into_iter()
    .filter_map(Result::err)
    .collect();
    let elapsed = started.elapsed();
    ensure!(failures.is_empty(), "{} failing case(s); first: {}", failures.len(), failures[0]);
    ensure!(elapsed < Duration::from_secs(60), "took {:.1} s", elapsed.as_secs_f64());
    Ok(format!("{n} cases, {:.1} s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 4: parsers
// ---------------------------------------------------------------------------

const TOKENS: [&str; 28] = [
    "[", "]", ",", " ", "\n", "0.5", "-1", "1e308", "1e-400", "NaN", "inf", "100", "99.9", "0", "1", ".", "Answer:",
    "answer is", "(A)", "(B)", "B", "E", "(", ")", "**", "alpha", "Region:", "\u{fffd}",
];

fn fuzz_input(i: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf022 + i as u64);
    let len = rng.random_range(0..=400usize);
    if i.is_multiple_of(2) {
        let mut bytes = vec![0u8; len];
        rng.fill(&mut bytes[..]);
        String::from_utf8_lossy(&bytes).into_owned()
    } else {
        (0..len / 4).map(|_| TOKENS[rng.random_range(0..TOKENS.len())]).collect()
    }
}

fn precedence_rules() -> Result<(), String> {
    let options = label_options(&["alpha", "beta", "gamma"]).expect("options");
    let label = |c| ChoiceLabel::new(c);
    let cases: [(&str, Option<ChoiceLabel>, &str); 9] = [
        ("B\nThe sign says alpha.\nAnswer: (C)", label('C'), "explicit answer beats lone letter and option text"),
        ("Answer: A. On reflection the answer is (B).", label('B'), "last explicit answer wins"),
        ("Answer: (E)\nB", label('B'), "explicit answer must name an offered label"),
        ("Looking closely at gamma and beta...\nB\n", label('B'), "lone letter beats option text"),
        ("A\nthen\nB", None, "two distinct lone letters are ambiguous"),
        ("**(C)**", label('C'), "decorated lone letter"),
        ("It is clearly the GAMMA one.", label('C'), "single option text, case-insensitive"),
        ("Either alpha or beta.", None, "two option texts are ambiguous"),
        ("No idea.", None, "nothing to parse"),
    ];
    for (text, want, rule) in cases {
        let got = parse_choice(text, &options);
        ensure!(got == want, "{rule}: {text:?} parsed as {got:?}, expected {want:?}");
    }
    Ok(())
}

fn c4_parsers() -> Check {
    let started = Instant::now();
    let options = label_options(&["alpha", "beta", "gamma", "delta"]).expect("options");
    let n = 100_000;
    let previous_hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let outcomes = exec::map_range(Execution::default(), n, |i| {
        let input = fuzz_input(i);
        match panic::catch_unwind(AssertUnwindSafe(|| parse_zoom_reply(&input, &options))) {
            Err(_) => Err(format!("panic on input {i}: {input:?}")),
            Ok(p) => match p.bbox {
                Some(b) if !b.is_valid() => Err(format!("invalid box {b:?} from input {i}")),
                _ if p.preliminary_answer.is_some_and(|l| l.index() >= options.len()) => {
                    Err(format!("unoffered label from input {i}"))
                }
                _ => Ok(()),
            },
        }
    });
    panic::set_hook(previous_hook);
    let failures: Vec<String> = outcomes.into_iter().filter_map(Result::err).collect();
    ensure!(failures.is_empty(), "{} failure(s); first: {}", failures.len(), failures[0]);

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0f64;
    for _ in 0..10_000 {
        let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
        let b = NormBBox::new(v[0].min(v[2]), v[1].min(v[3]), v[0].max(v[2]), v[1].max(v[3]));
        let Ok(b) = b else { continue };
        let reply = format!("The text is small.\nAnswer: (B)\nRegion: {}", format_bbox(&b));
        let parsed = parse_zoom_reply(&reply, &options).bbox.ok_or("formatted box did not parse")?;
        for (a, e) in parsed.to_array().iter().zip(b.to_array()) {
            worst = worst.max((a - e).abs());
        }
    }
    ensure!(worst <= 1e-9, "round-trip error {worst:e}");
    precedence_rules()?;
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {:.1} s", elapsed.as_secs_f64());
    Ok(format!(
        "{n} fuzz inputs, 0 panics; round-trip error {worst:.1e}; precedence rules hold; {:.1} s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 5: metrics
// ---------------------------------------------------------------------------

fn random_case(seed: u64) -> (Vec<BenchmarkRecord>, Vec<PipelineTrace>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = ["OCR", "RS", "DT", "MO", "AD", "FSP", "FCP", "misc"];
    let n_subtasks = rng.random_range(1..=pool.len());
    let n = rng.random_range(1..=60);
    let records: Vec<BenchmarkRecord> = (0..n)
        .map(|i| {
            let k = rng.random_range(2..=5usize);
            BenchmarkRecord {
                id: format!("r{i}"),
                image: PathBuf::from("unused.png"),
                question: "q?".into(),
                options: (0..k).map(|j| format!("opt{j}")).collect(),
                answer: ChoiceLabel::from_index(rng.random_range(0..k)).unwrap(),
                task: if rng.random_bool(0.5) { Task::Perception } else { Task::Reasoning },
                subtask: pool[rng.random_range(0..n_subtasks)].to_string(),
            }
        })
        .collect();
    let kept: Vec<&BenchmarkRecord> = records.iter().filter(|_| rng.random_bool(0.9)).collect();
    let mut traces: Vec<PipelineTrace> = kept
        .into_iter()
        .map(|r| {
            let mut t = PipelineTrace::new(&r.id, Mode::ZoomRefine, "h");
            let roll: f64 = rng.random();
            if roll < 0.05 {
                t.error = Some(TraceError {
                    stage: Stage::Stage1,
                    message: "boom".into(),
                    fatal: false,
                });
            } else if roll < 0.15 {
                t.final_answer = None;
            } else {
                t.final_answer = ChoiceLabel::from_index(rng.random_range(0..r.options.len()));
            }
            if rng.random_bool(0.2) {
                t.fallback_reason = Some(
                    [FallbackReason::NoBbox, FallbackReason::CropFailed, FallbackReason::Stage2Unparsed]
                        [rng.random_range(0..3)],
                );
            }
            t.revised = rng.random_bool(0.3);
            t
        })
        .collect();
    traces.shuffle(&mut rng);
    (records, traces)
}

/// (avg, avg_c, per-subtask (correct, total), [fallback, revision, unparsed] rates)
type Tally = (f64, f64, BTreeMap<String, (usize, usize)>, [f64; 3]);

/// Straightforward tally kept independent of the library's scoring code.
fn brute_force(records: &[BenchmarkRecord], traces: &[PipelineTrace]) -> Tally {
    let truth: HashMap<&str, (&str, char)> =
        records.iter().map(|r| (r.id.as_str(), (r.subtask.as_str(), r.answer.as_char()))).collect();
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut hits = 0usize;
    let (mut fb, mut rev, mut unp) = (0usize, 0usize, 0usize);
    for t in traces {
        let (subtask, answer) = truth[t.question_id.as_str()];
        let right = t.error.is_none() && t.final_answer.map(|l| l.as_char()) == Some(answer);
        let e = tally.entry(subtask.to_string()).or_insert((0, 0));
        e.1 += 1;
        if right {
            e.0 += 1;
            hits += 1;
        }
        fb += t.fallback_reason.is_some() as usize;
        rev += t.revised as usize;
        unp += (t.error.is_none() && t.final_answer.is_none()) as usize;
    }
    let total = traces.len() as f64;
    let avg = if traces.is_empty() { 0.0 } else { hits as f64 / total };
    let avg_c = if tally.is_empty() {
        0.0
    } else {
        tally.values().map(|(c, n)| *c as f64 / *n as f64).sum::<f64>() / tally.len() as f64
    };
    let rates = if traces.is_empty() {
        [0.0; 3]
    } else {
        [fb as f64 / total, rev as f64 / total, unp as f64 / total]
    };
    (avg, avg_c, tally, rates)
}

fn c5_metrics() -> Check {
    let tol = 1e-12;
    for seed in 0..1000u64 {
        let (records, traces) = random_case(seed);
        let s = bench::score(&traces, &records).map_err(|e| format!("set {seed}: {e}"))?;
        let (avg, avg_c, tally, rates) = brute_force(&records, &traces);
        ensure!((s.avg - avg).abs() <= tol, "set {seed}: avg {} vs {avg}", s.avg);
        ensure!((s.avg_c - avg_c).abs() <= tol, "set {seed}: avg_c {} vs {avg_c}", s.avg_c);
        ensure!(s.per_subtask.len() == tally.len(), "set {seed}: subtask count");
        for (name, (c, n)) in &tally {
            let got = &s.per_subtask[name];
            ensure!(got.correct == *c && got.total == *n, "set {seed}: {name} tally");
            ensure!((got.accuracy - *c as f64 / *n as f64).abs() <= tol, "set {seed}: {name} accuracy");
        }
        let got = [s.fallback_rate, s.revision_rate, s.unparsed_rate];
        for (g, w) in got.iter().zip(rates) {
            ensure!((g - w).abs() <= tol, "set {seed}: rates {got:?} vs {rates:?}");
        }
        ensure!(
            [s.avg, s.avg_c, s.fallback_rate, s.revision_rate, s.unparsed_rate].iter().all(|v| (0.0..=1.0).contains(v)),
            "set {seed}: rate outside [0, 1]"
        );
        let json = bench::report(&s, bench::ReportFormat::Json);
        ensure!(EvalSummary::from_json(&json).ok().as_ref() == Some(&s), "set {seed}: JSON round trip");
    }

    // The worked example: {X: 1/2, Y: 3/3}.
    let mk = |id: &str, sub: &str| BenchmarkRecord {
        id: id.into(),
        image: PathBuf::new(),
        question: "q".into(),
        options: vec!["a".into(), "b".into()],
        answer: ChoiceLabel::new('A').unwrap(),
        task: Task::Perception,
        subtask: sub.into(),
    };
    let records: Vec<_> = [("x1", "X"), ("x2", "X"), ("y1", "Y"), ("y2", "Y"), ("y3", "Y")]
        .iter()
        .map(|(i, s)| mk(i, s))
        .collect();
    let traces: Vec<_> = records
        .iter()
        .map(|r| {
            let mut t = PipelineTrace::new(&r.id, Mode::ZoomRefine, "h");
            t.final_answer = ChoiceLabel::new(if r.id == "x2" { 'B' } else { 'A' });
            t
        })
        .collect();
    let s = bench::score(&traces, &records).map_err(|e| e.to_string())?;
    ensure!(s.avg == 4.0 / 5.0 && s.avg_c == 0.75, "worked example gave {} / {}", s.avg, s.avg_c);
    let single = bench::score(&traces[2..], &records).map_err(|e| e.to_string())?;
    ensure!(single.avg == single.avg_c && single.avg == 1.0, "single subtask, all correct");
    Ok("1000 randomized sets match the brute-force tally to 1e-12; 4/5 -> Avg 0.800, Avg-C 0.750".into())
}

// ---------------------------------------------------------------------------
// 6: determinism and resume
// ---------------------------------------------------------------------------

/// Raises `flag` once `limit` calls have been forwarded.
struct CancelAfter<B> {
    inner: B,
    calls: AtomicUsize,
    limit: usize,
    flag: Arc<AtomicBool>,
}

impl<B: ChatBackend> ChatBackend for CancelAfter<B> {
    fn complete(&self, conv: &Conversation) -> Result<ModelReply, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) + 1 >= self.limit {
            self.flag.store(true, Ordering::SeqCst);
        }
        self.inner.complete(conv)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

fn subset(records: &[BenchmarkRecord]) -> Vec<BenchmarkRecord> {
    records.iter().take(30).chain(records.iter().skip(170)).cloned().collect()
}

fn c6_determinism(root: &Path, ds: &GeneratedDataset) -> Check {
    let records = subset(&bench::load_dataset(&ds.dataset_path, None).map_err(|e| e.to_string())?);
    let n = records.len();
    let ocfg = OracleConfig {
        no_bbox_probability: 0.1,
        bbox_noise: 0.001,
        ..OracleConfig::default()
    };
    let backend = oracle(ds, ocfg.clone());
    let one = run(&records, Mode::ZoomRefine, &backend, 1)?;
    let eight = run(&records, Mode::ZoomRefine, &backend, 8)?;
    ensure!(
        summary_bytes(&one.summary) == summary_bytes(&eight.summary),
        "summaries differ between parallelism 1 and 8"
    );
    let strip = |ts: &[PipelineTrace]| ts.iter().map(PipelineTrace::without_timing).collect::<Vec<_>>();
    ensure!(strip(&one.traces) == strip(&eight.traces), "traces differ between parallelism 1 and 8");

    // In-process cancel, then resume.
    let cache = root.join("c6-cache");
    let flag = Arc::new(AtomicBool::new(false));
    let interrupted = CancelAfter {
        inner: oracle(ds, ocfg.clone()),
        calls: AtomicUsize::new(0),
        limit: 25,
        flag: flag.clone(),
    };
    let opts = EvalOptions {
        parallelism: 4,
        cache_dir: Some(cache.clone()),
        resume: true,
        cancel: Some(&*flag),
    };
    let first = bench::evaluate(&records, &cfg(Mode::ZoomRefine), &interrupted, &opts).map_err(|e| e.to_string())?;
    ensure!(first.cancelled && first.skipped > 0, "cancellation did not stop the run");
    let done = first.traces.len();
    let counting = CountingBackend::new(oracle(ds, ocfg));
    let opts = EvalOptions {
        parallelism: 4,
        cache_dir: Some(cache),
        resume: true,
        cancel: None,
    };
    let second = bench::evaluate(&records, &cfg(Mode::ZoomRefine), &counting, &opts).map_err(|e| e.to_string())?;
    ensure!(second.cached == done, "resumed {} from cache, {done} were completed", second.cached);
    let expected_calls: usize = second.traces.iter().filter(|t| !first.traces.iter().any(|f| f.question_id == t.question_id)).map(PipelineTrace::backend_calls).sum();
    ensure!(
        counting.calls() == expected_calls,
        "resume made {} calls; uncached records need {expected_calls}",
        counting.calls()
    );
    ensure!(
        summary_bytes(&second.summary) == summary_bytes(&one.summary),
        "resumed summary differs from the uninterrupted one"
    );

    let cli = cli_kill_and_resume(root, ds)?;
    Ok(format!(
        "{n} records: parallelism 1 == 8 byte-for-byte; in-process resume reused {done}, made {} new calls; {cli}",
        counting.calls()
    ))
}

fn eval_command(ds: &GeneratedDataset, dataset: &Path, url: &str, cache: &Path, out: &Path, resume: bool) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_zoomrefine"));
    cmd.args(["eval", "--mode", "zoom-refine", "--backend", "http", "--parallelism", "2"])
        .arg("--dataset")
        .arg(dataset)
        .arg("--image-root")
        .arg(&ds.root)
        .args(["--endpoint", url])
        .arg("--cache-dir")
        .arg(cache)
        .arg("--out")
        .arg(out)
        .env_remove("OPENAI_API_KEY")
        .env("RUST_LOG", "error")
        .stdout(Stdio::null())
        .stderr(Stdio::null());
    if resume {
        cmd.arg("--resume");
    }
    cmd
}

/// Interrupts a CLI evaluation with SIGINT once some traces are cached,
/// resumes it, and checks that no record was sent to the model twice and
/// that the final summary equals an uninterrupted run's.
fn cli_kill_and_resume(root: &Path, ds: &GeneratedDataset) -> Result<String, String> {
    let records = subset(&bench::load_dataset(&ds.dataset_path, None).map_err(|e| e.to_string())?);
    let n = records.len();
    let dataset = root.join("c6-subset.jsonl");
    let relative: Vec<BenchmarkRecord> = records
        .iter()
        .map(|r| BenchmarkRecord {
            image: r.image.strip_prefix(&ds.root).unwrap_or(&r.image).to_path_buf(),
            ..r.clone()
        })
        .collect();
    bench::write_dataset(&dataset, &relative).map_err(|e| e.to_string())?;

    let counting = Arc::new(CountingBackend::new(oracle(ds, OracleConfig::default())));
    let server = WireServer::start("127.0.0.1:0", counting.clone(), None, 4).map_err(|e| e.to_string())?;
    let url = server.base_url();
    let cache = root.join("c6-cli-cache");
    let out = root.join("c6-cli-out");

    let mut child = eval_command(ds, &dataset, &url, &cache, &out, false)
        .spawn()
        .map_err(|e| e.to_string())?;
    let deadline = Instant::now() + Duration::from_secs(120);
    let cached = |dir: &Path| -> usize {
        std::fs::read_dir(dir)
            .into_iter()
            .flatten()
            .flatten()
            .filter(|e| e.path().is_dir())
            .map(|d| {
                std::fs::read_dir(d.path())
                    .map(|it| it.flatten().filter(|f| f.path().extension().is_some_and(|x| x == "json")).count())
                    .unwrap_or(0)
            })
            .sum()
    };
    while cached(&cache) < 5 {
        ensure!(Instant::now() < deadline, "no traces cached within 120 s");
        if let Some(status) = child.try_wait().map_err(|e| e.to_string())? {
            return Err(format!("eval exited before it could be interrupted ({status})"));
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    let killed = Command::new("kill")
        .args(["-INT", &child.id().to_string()])
        .status()
        .map_err(|e| e.to_string())?;
    ensure!(killed.success(), "could not signal the eval process");
    let status = child.wait().map_err(|e| e.to_string())?;
    ensure!(status.code() == Some(130), "interrupted eval exited with {status}");
    let after_interrupt = counting.calls();
    let partial = cached(&cache);
    ensure!(partial < n, "all {n} records finished before the interrupt");

    let status = eval_command(ds, &dataset, &url, &cache, &out, true)
        .status()
        .map_err(|e| e.to_string())?;
    ensure!(status.success(), "resumed eval exited with {status}");
    let total_calls = counting.calls();
    ensure!(
        total_calls == 2 * n,
        "interrupt + resume made {total_calls} calls for {n} records; {} would mean no repeats",
        2 * n
    );

    let fresh_out = root.join("c6-cli-fresh");
    let status = eval_command(ds, &dataset, &url, &root.join("c6-cli-fresh-cache"), &fresh_out, false)
        .status()
        .map_err(|e| e.to_string())?;
    ensure!(status.success(), "fresh eval exited with {status}");
    let read = |dir: &Path| -> Result<EvalSummary, String> {
        let text = std::fs::read_to_string(dir.join("zoom_refine/summary.json")).map_err(|e| e.to_string())?;
        EvalSummary::from_json(&text).map_err(|e| e.to_string())
    };
    ensure!(
        summary_bytes(&read(&out)?) == summary_bytes(&read(&fresh_out)?),
        "resumed CLI summary differs from an uninterrupted CLI run"
    );
    Ok(format!(
        "CLI interrupted after {partial}/{n} records ({after_interrupt} calls), resumed with {} more, summary identical",
        total_calls - after_interrupt
    ))
}

// ---------------------------------------------------------------------------
// 8: live smoke
// ---------------------------------------------------------------------------

fn c8_live(root: &Path) -> Option<Check> {
    let endpoint = std::env::var("ZOOMREFINE_LIVE_ENDPOINT").ok()?;
    let model = std::env::var("ZOOMREFINE_LIVE_MODEL").unwrap_or_else(|_| "default".into());
    Some((|| {
        let ds = dataset(&root.join("c8"), 1, 0, 8);
        let rec = &ds.records[0];
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_zoomrefine"));
        cmd.args(["run", "--json", "--backend", "http", "--endpoint", &endpoint, "--model", &model])
            .arg("--image")
            .arg(ds.root.join(&rec.image))
            .args(["--question", &rec.question]);
        for o in &rec.options {
            cmd.args(["--option", o]);
        }
        let out = cmd.output().map_err(|e| e.to_string())?;
        ensure!(
            out.status.success(),
            "run exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr)
        );
        let trace: PipelineTrace = serde_json::from_slice(&out.stdout).map_err(|e| format!("trace JSON: {e}"))?;
        ensure!(trace.stage1.is_some() && trace.stage2.is_some(), "run did not complete both stages: {:?}", trace.fallback_reason);
        Ok(format!("{endpoint}: both stages completed, final answer {:?}", trace.final_answer))
    })())
}

// ---------------------------------------------------------------------------

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut results: Vec<(&str, &str, Option<Check>)> = Vec::new();
    let mut guard = |id: &'static str, title: &'static str, f: &mut dyn FnMut() -> Option<Check>| {
        let outcome = match panic::catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Some(Err(format!(
                "panicked: {}",
                p.downcast_ref::<String>()
                    .map(String::as_str)
                    .or_else(|| p.downcast_ref::<&str>().copied())
                    .unwrap_or("?")
            ))),
        };
        let (status, detail) = match &outcome {
            Some(Ok(d)) => ("PASS", d.clone()),
            Some(Err(d)) => ("FAIL", d.clone()),
            None => ("SKIP", "set ZOOMREFINE_LIVE_ENDPOINT (and optionally ZOOMREFINE_LIVE_MODEL) to run".into()),
        };
        println!("{id} {title:<28} {status}  {detail}");
        results.push((id, title, outcome));
    };

    let started = Instant::now();
    let c1_ds = dataset(&root.join("c1"), 200, 100, 2024);
    let mut mechanism = None;
    guard("C1", "mechanism reproduction", &mut || Some(c1_mechanism(&c1_ds, started, &mut mechanism)));
    guard("C2", "degradation robustness", &mut || Some(c2_degradation(root)));
    guard("C3", "geometry suite", &mut || Some(c3_geometry()));
    guard("C4", "parser suite", &mut || Some(c4_parsers()));
    guard("C5", "metrics oracle", &mut || Some(c5_metrics()));
    guard("C6", "determinism and resume", &mut || Some(c6_determinism(root, &c1_ds)));
    guard("C7", "cost accounting", &mut || Some(c7_cost(&mechanism)));
    guard("C8", "live-backend smoke", &mut || c8_live(root));

    let failed = results.iter().filter(|(_, _, r)| matches!(r, Some(Err(_)))).count();
    let passed = results.iter().filter(|(_, _, r)| matches!(r, Some(Ok(_)))).count();
    let skipped = results.len() - failed - passed;
    println!("acceptance: {passed} passed, {failed} failed, {skipped} skipped");
    if failed > 0 {
        std::process::exit(1);
    }
}
