//! Synthetic benchmark scenes with a known tiny target, and an oracle
//! backend that can only read the target when it is presented large enough.

pub mod font;
mod oracle;
mod scene;

use thiserror::Error;

pub use oracle::{legibility, Legibility, OracleBackend, OracleConfig, SceneRegistry, WrongAnswerPolicy};
pub use scene::{
    gen_scene, generate_dataset, scene_id, DatasetParams, GeneratedDataset, SceneParams, SceneSpec, LARGE_SUBTASK,
    OPTION_COUNT, SMALL_SUBTASK, TARGET_INK, TARGET_QUESTION,
};

use crate::imaging::ImagingError;

#[derive(Debug, Error)]
pub enum MockworldError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("scene file line {line}: {message}")]
    Scenes { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}
