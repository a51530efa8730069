//! Two-stage inference engine for high-resolution visual question answering.
//!
//! A multimodal model first answers from a downsampled view and names the
//! region it considers most relevant as a normalized bounding box. The region
//! is then cut from the original full-resolution image and shown back to the
//! model together with the first-stage transcript, so it can reaffirm or
//! revise its answer against the fine-grained evidence.
//!
//! Modules:
//!
//! - [`imaging`]: decoding, downsampling, box denormalization, crop expansion
//!   and extraction, encoding for transport.
//! - [`protocol`]: prompt templates, conversation assembly, reply parsing.
//! - [`backend`]: the model boundary (OpenAI-compatible HTTP client, a
//!   scriptable mock, and an HTTP server exposing any backend on the same
//!   wire contract).
//! - [`pipeline`]: baseline and zoom-refine runs with fallback and tracing.
//! - [`bench`]: dataset ingestion, bounded-concurrency evaluation with a
//!   resumable cache, scoring and reports.
//! - [`mockworld`]: procedural scenes with ground truth and an oracle model
//!   whose perception depends on presented glyph size.

pub mod backend;
pub mod bench;
pub mod exec;
pub mod imaging;
pub mod mockworld;
pub mod pipeline;
pub mod protocol;

mod digest;

pub use backend::{BackendConfig, BackendError, ChatBackend, ModelReply};
pub use bench::{BenchmarkRecord, EvalSummary};
pub use exec::Execution;
pub use imaging::{CropPolicy, Image, NormBBox, PixelRect};
pub use pipeline::{Mode, PipelineConfig, PipelineTrace};
pub use protocol::{ChoiceLabel, Conversation, PromptTemplates, Turn};
