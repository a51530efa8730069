//! Baseline and zoom-refine runs over one question, producing a
//! [`PipelineTrace`] that records every intermediate value.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::backend::{BackendError, ChatBackend, ModelReply};
use crate::digest::sha256_hex;
use crate::exec::Execution;
use crate::imaging::{self, CropPolicy, Image, ImageFormat, ImagingError, NormBBox, PixelRect};
use crate::protocol::{self, label_options, AnswerOption, ChoiceLabel, PromptTemplates, ProtocolError};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One call on the downsampled image.
    Baseline,
    /// Localize on the downsampled image, then refine on a full-resolution crop.
    #[default]
    ZoomRefine,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::ZoomRefine => "zoom_refine",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Everything that determines a run besides the backend itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub downsample_max_side: u32,
    pub crop_policy: CropPolicy,
    pub image_format: ImageFormat,
    pub templates: PromptTemplates,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ZoomRefine,
            downsample_max_side: imaging::DEFAULT_DOWNSAMPLE_MAX_SIDE,
            crop_policy: CropPolicy::default(),
            image_format: ImageFormat::Png,
            templates: PromptTemplates::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.downsample_max_side == 0 {
            return Err(PipelineError::Config("downsample_max_side must be >= 1".into()));
        }
        self.crop_policy.validate()?;
        self.templates.validate()?;
        if let ImageFormat::Jpeg { quality } = self.image_format {
            if !(1..=100).contains(&quality) {
                return Err(PipelineError::Config(format!("JPEG quality must be 1-100, got {quality}")));
            }
        }
        Ok(())
    }

    /// Cache and provenance key: SHA-256 over the canonical JSON of this
    /// config and the backend fingerprint.
    pub fn config_hash(&self, backend: &dyn ChatBackend) -> String {
        let json = serde_json::to_string(self).expect("pipeline config serializes");
        sha256_hex(&[json.as_bytes(), backend.fingerprint().as_bytes()])
    }
}

/// One model call as seen by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub raw_text: String,
    pub answer: Option<ChoiceLabel>,
    pub latency_ms: f64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub attempts: u32,
}

impl StageRecord {
    fn new(reply: &ModelReply, answer: Option<ChoiceLabel>) -> Self {
        Self {
            raw_text: reply.text.clone(),
            answer,
            latency_ms: reply.latency_ms,
            prompt_tokens: reply.prompt_tokens,
            completion_tokens: reply.completion_tokens,
            attempts: reply.attempt_count,
        }
    }
}

/// Why the refinement answer was not used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackReason {
    NoBbox,
    CropFailed,
    Stage2Unparsed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Setup,
    Stage1,
    Stage2,
}

/// A run that produced no answer at all.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceError {
    pub stage: Stage,
    pub message: String,
    /// Retrying or continuing cannot help (e.g. rejected credentials).
    pub fatal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub schema_version: u32,
    pub question_id: String,
    pub mode: Mode,
    pub config_hash: String,
    pub original_width: u32,
    pub original_height: u32,
    pub downsampled_width: u32,
    pub downsampled_height: u32,
    pub stage1: Option<StageRecord>,
    pub bbox: Option<NormBBox>,
    pub bbox_repaired: bool,
    /// Box realized on the original image.
    pub pixel_rect: Option<PixelRect>,
    /// Expanded and clamped region cut from the original image.
    pub crop_rect: Option<PixelRect>,
    pub crop_presented_width: Option<u32>,
    pub crop_presented_height: Option<u32>,
    pub crop_resized: bool,
    pub stage2: Option<StageRecord>,
    pub fallback_reason: Option<FallbackReason>,
    pub final_answer: Option<ChoiceLabel>,
    pub revised: bool,
    pub error: Option<TraceError>,
}

impl PipelineTrace {
    pub fn new(question_id: &str, mode: Mode, config_hash: &str) -> Self {
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            question_id: question_id.to_string(),
            mode,
            config_hash: config_hash.to_string(),
            original_width: 0,
            original_height: 0,
            downsampled_width: 0,
            downsampled_height: 0,
            stage1: None,
            bbox: None,
            bbox_repaired: false,
            pixel_rect: None,
            crop_rect: None,
            crop_presented_width: None,
            crop_presented_height: None,
            crop_resized: false,
            stage2: None,
            fallback_reason: None,
            final_answer: None,
            revised: false,
            error: None,
        }
    }

    /// Model calls made for this trace.
    pub fn backend_calls(&self) -> usize {
        usize::from(self.stage1.is_some()) + usize::from(self.stage2.is_some())
    }

    pub fn prompt_tokens(&self) -> u64 {
        self.stages().map(|s| s.prompt_tokens).sum()
    }

    pub fn completion_tokens(&self) -> u64 {
        self.stages().map(|s| s.completion_tokens).sum()
    }

    pub fn latency_ms(&self) -> f64 {
        self.stages().map(|s| s.latency_ms).sum()
    }

    fn stages(&self) -> impl Iterator<Item = &StageRecord> {
        self.stage1.iter().chain(self.stage2.iter())
    }

    /// Same trace with latencies zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut t = self.clone();
        for s in t.stage1.iter_mut().chain(t.stage2.iter_mut()) {
            s.latency_ms = 0.0;
        }
        t
    }

    fn fail(mut self, stage: Stage, message: String, fatal: bool) -> Self {
        self.error = Some(TraceError { stage, message, fatal });
        self
    }

    fn backend_failure(self, stage: Stage, e: BackendError) -> Self {
        let fatal = e.is_fatal();
        self.fail(stage, e.to_string(), fatal)
    }
}

/// One question to answer.
#[derive(Debug, Clone, Copy)]
pub struct Question<'a> {
    pub id: &'a str,
    pub image: &'a Image,
    pub question: &'a str,
    /// Option texts, labeled `A`, `B`, ... by position.
    pub options: &'a [String],
}

/// Runs `cfg.mode` on one question. Never panics on model output; failures
/// are recorded in the trace.
pub fn run(q: &Question<'_>, cfg: &PipelineConfig, backend: &dyn ChatBackend) -> PipelineTrace {
    run_with_hash(q, cfg, backend, &cfg.config_hash(backend))
}

/// As [`run`], with a precomputed config hash.
pub fn run_with_hash(
    q: &Question<'_>,
    cfg: &PipelineConfig,
    backend: &dyn ChatBackend,
    config_hash: &str,
) -> PipelineTrace {
    let mut trace = PipelineTrace::new(q.id, cfg.mode, config_hash);
    trace.original_width = q.image.width();
    trace.original_height = q.image.height();
    if let Err(e) = cfg.validate() {
        return trace.fail(Stage::Setup, e.to_string(), true);
    }
    let options = match label_options(q.options) {
        Ok(o) => o,
        Err(e) => return trace.fail(Stage::Setup, e.to_string(), false),
    };
    // Tag the image so every derived view records the region it shows.
    let image = match &q.image.origin {
        Some(_) => q.image.clone(),
        None => q.image.clone().with_origin_id(q.id),
    };
    let ds = imaging::downsample_with(&image, cfg.downsample_max_side, Execution::default());
    trace.downsampled_width = ds.width();
    trace.downsampled_height = ds.height();
    match cfg.mode {
        Mode::Baseline => baseline(trace, q, &ds, &options, cfg, backend),
        Mode::ZoomRefine => zoom_refine(trace, q, &image, &ds, &options, cfg, backend),
    }
}

fn baseline(
    mut trace: PipelineTrace,
    q: &Question<'_>,
    ds: &Image,
    options: &[AnswerOption],
    cfg: &PipelineConfig,
    backend: &dyn ChatBackend,
) -> PipelineTrace {
    let conv = match protocol::render_baseline_request(ds, q.question, options, &cfg.templates, cfg.image_format) {
        Ok(c) => c,
        Err(e) => return trace.fail(Stage::Setup, e.to_string(), false),
    };
    let reply = match backend.complete(&conv) {
        Ok(r) => r,
        Err(e) => return trace.backend_failure(Stage::Stage1, e),
    };
    let answer = protocol::parse_choice(&reply.text, options);
    trace.stage1 = Some(StageRecord::new(&reply, answer));
    trace.final_answer = answer;
    trace
}

fn zoom_refine(
    mut trace: PipelineTrace,
    q: &Question<'_>,
    image: &Image,
    ds: &Image,
    options: &[AnswerOption],
    cfg: &PipelineConfig,
    backend: &dyn ChatBackend,
) -> PipelineTrace {
    let conv1 = match protocol::render_zoom_request(ds, q.question, options, &cfg.templates, cfg.image_format) {
        Ok(c) => c,
        Err(e) => return trace.fail(Stage::Setup, e.to_string(), false),
    };
    let reply1 = match backend.complete(&conv1) {
        Ok(r) => r,
        Err(e) => return trace.backend_failure(Stage::Stage1, e),
    };
    let parsed = protocol::parse_zoom_reply(&reply1.text, options);
    let initial = parsed.preliminary_answer;
    trace.stage1 = Some(StageRecord::new(&reply1, initial));
    trace.bbox = parsed.bbox;
    trace.bbox_repaired = parsed.bbox_repaired;
    trace.final_answer = initial;

    let Some(bbox) = parsed.bbox else {
        trace.fallback_reason = Some(FallbackReason::NoBbox);
        return trace;
    };

    // The box is realized on the original image, not the downsampled view.
    let rect = imaging::denormalize(&bbox, image);
    let crop_rect = imaging::expand_and_clamp(&rect, &cfg.crop_policy, image);
    trace.pixel_rect = Some(rect);
    trace.crop_rect = Some(crop_rect);
    let crop = match imaging::crop(image, &crop_rect) {
        Ok(c) => c,
        Err(e) => {
            debug!(id = q.id, error = %e, "crop failed");
            trace.fallback_reason = Some(FallbackReason::CropFailed);
            return trace;
        }
    };
    let max = cfg.crop_policy.max_side_px;
    let crop = if crop.width().max(crop.height()) > max {
        trace.crop_resized = true;
        imaging::downsample_with(&crop, max, Execution::default())
    } else {
        crop
    };
    trace.crop_presented_width = Some(crop.width());
    trace.crop_presented_height = Some(crop.height());

    let conv2 = match protocol::build_refine_conversation(
        &conv1,
        &reply1.text,
        &crop,
        q.question,
        options,
        &cfg.templates,
        cfg.image_format,
    ) {
        Ok(c) => c,
        Err(e) => {
            debug!(id = q.id, error = %e, "refinement request could not be built");
            trace.fallback_reason = Some(FallbackReason::CropFailed);
            return trace;
        }
    };
    let reply2 = match backend.complete(&conv2) {
        Ok(r) => r,
        Err(e) => return trace.backend_failure(Stage::Stage2, e),
    };
    let refined = protocol::parse_choice(&reply2.text, options);
    trace.stage2 = Some(StageRecord::new(&reply2, refined));
    match refined {
        Some(label) => {
            trace.final_answer = Some(label);
            trace.revised = initial != Some(label);
        }
        None => trace.fallback_reason = Some(FallbackReason::Stage2Unparsed),
    }
    trace
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CountingBackend, MockScript, ScriptedBackend};

    fn image() -> Image {
        Image::filled(400, 300, &[90, 120, 150]).unwrap()
    }

    fn opts() -> Vec<String> {
        vec!["red".into(), "green".into(), "blue".into()]
    }

    fn run_script(script: MockScript, mode: Mode) -> (PipelineTrace, usize) {
        let backend = CountingBackend::new(ScriptedBackend::new(script));
        let cfg = PipelineConfig {
            mode,
            downsample_max_side: 200,
            ..PipelineConfig::default()
        };
        let img = image();
        let options = opts();
        let q = Question {
            id: "q1",
            image: &img,
            question: "What color?",
            options: &options,
        };
        let t = run(&q, &cfg, &backend);
        (t, backend.calls())
    }

    #[test]
    fn zoom_refine_revises() {
        let script = MockScript::new()
            .on_stage(1, "Looks red.\nAnswer: (A)\nRegion: [0.25, 0.25, 0.5, 0.5]")
            .on_stage(2, "Up close it is blue.\nAnswer: (C)");
        let (t, calls) = run_script(script, Mode::ZoomRefine);
        assert_eq!(calls, 2);
        assert_eq!(t.final_answer, ChoiceLabel::new('C'));
        assert!(t.revised);
        assert_eq!(t.fallback_reason, None);
        assert_eq!(t.pixel_rect, Some(PixelRect::new(100, 75, 200, 150)));
        // 100x75 grows to the 448 minimum, capped at the 400x300 extent.
        assert_eq!(t.crop_rect, Some(PixelRect::new(0, 0, 400, 300)));
        assert_eq!((t.downsampled_width, t.downsampled_height), (200, 150));
        assert_eq!(t.backend_calls(), 2);
    }

    #[test]
    fn missing_box_falls_back_with_one_call() {
        let script = MockScript::new().on_stage(1, "Answer: (B)").on_stage(2, "Answer: (C)");
        let (t, calls) = run_script(script, Mode::ZoomRefine);
        assert_eq!(calls, 1);
        assert_eq!(t.fallback_reason, Some(FallbackReason::NoBbox));
        assert_eq!(t.final_answer, ChoiceLabel::new('B'));
        assert!(!t.revised);
    }

    #[test]
    fn unparsed_refinement_keeps_initial() {
        let script = MockScript::new()
            .on_stage(1, "Answer: (B) [0.1, 0.1, 0.2, 0.2]")
            .on_stage(2, "I cannot tell.");
        let (t, _) = run_script(script, Mode::ZoomRefine);
        assert_eq!(t.fallback_reason, Some(FallbackReason::Stage2Unparsed));
        assert_eq!(t.final_answer, ChoiceLabel::new('B'));
        assert!(t.stage2.is_some());
    }

    #[test]
    fn baseline_is_one_call() {
        let script = MockScript::new().otherwise("Answer: (B)");
        let (t, calls) = run_script(script, Mode::Baseline);
        assert_eq!(calls, 1);
        assert_eq!(t.final_answer, ChoiceLabel::new('B'));
        assert!(t.stage2.is_none() && t.bbox.is_none());
    }

    #[test]
    fn backend_errors_are_recorded() {
        let (t, _) = run_script(MockScript::new().on_stage(2, "x"), Mode::ZoomRefine);
        let err = t.error.expect("stage one fails");
        assert_eq!(err.stage, Stage::Stage1);
        assert!(!err.fatal);
        assert_eq!(t.final_answer, None);
    }

    #[test]
    fn config_hash_depends_on_config_and_backend() {
        let a = ScriptedBackend::new(MockScript::new().otherwise("A"));
        let b = ScriptedBackend::new(MockScript::new().otherwise("B"));
        let cfg = PipelineConfig::default();
        let mut cfg2 = cfg.clone();
        cfg2.crop_policy.min_side_px = 224;
        assert_eq!(cfg.config_hash(&a), cfg.config_hash(&a));
        assert_ne!(cfg.config_hash(&a), cfg.config_hash(&b));
        assert_ne!(cfg.config_hash(&a), cfg2.config_hash(&a));
    }
}
