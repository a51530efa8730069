use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zoomrefine_core::imaging::{CropPolicy, ImageFormat, DEFAULT_DOWNSAMPLE_MAX_SIDE};
use zoomrefine_core::mockworld::OracleConfig;
use zoomrefine_core::pipeline::{Mode, PipelineConfig};
use zoomrefine_core::protocol::PromptTemplates;
use zoomrefine_core::BackendConfig;

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// OpenAI-compatible chat-completions endpoint.
    #[default]
    Http,
    /// In-process mockworld oracle; needs `oracle_scenes`.
    Oracle,
}

/// Everything a command needs, in one declarative file. Relative paths are
/// resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub mode: Mode,
    pub downsample_max_side: u32,
    /// Template file; the built-in templates when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Root for relative image paths; the dataset's directory when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
    pub parallelism: usize,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    pub backend_kind: BackendKind,
    /// `scenes.jsonl` used by the oracle backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_scenes: Option<PathBuf>,
    pub image_format: ImageFormat,
    pub crop_policy: CropPolicy,
    pub backend: BackendConfig,
    pub oracle: OracleConfig,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            mode: Mode::ZoomRefine,
            downsample_max_side: DEFAULT_DOWNSAMPLE_MAX_SIDE,
            templates: None,
            dataset: None,
            image_root: None,
            parallelism: 4,
            cache_dir: PathBuf::from(".zoomrefine-cache"),
            output_dir: PathBuf::from("results"),
            backend_kind: BackendKind::Http,
            oracle_scenes: None,
            image_format: ImageFormat::Png,
            crop_policy: CropPolicy::default(),
            backend: BackendConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            self.templates.as_mut(),
            self.dataset.as_mut(),
            self.image_root.as_mut(),
            self.oracle_scenes.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.cache_dir);
        fix(&mut self.output_dir);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, Failure> {
        let templates = match &self.templates {
            Some(p) => PromptTemplates::load(p).map_err(|e| Failure::config(e.to_string()))?,
            None => PromptTemplates::default(),
        };
        let cfg = PipelineConfig {
            mode: self.mode,
            downsample_max_side: self.downsample_max_side,
            crop_policy: self.crop_policy,
            image_format: self.image_format,
            templates,
        };
        cfg.validate().map_err(|e| Failure::config(e.to_string()))?;
        Ok(cfg)
    }
}
