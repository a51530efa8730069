use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::SceneSpec;
use super::MockworldError;
use crate::backend::mock::in_process_reply;
use crate::backend::{BackendError, ChatBackend, ModelReply};
use crate::digest::{seed_from, sha256_hex};
use crate::imaging::{inspect_encoded, EncodedInfo, NormBBox, Origin};
use crate::protocol::{label_options, parse_choice, ChoiceLabel, Conversation};

/// How the oracle answers when the target is not legible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrongAnswerPolicy {
    /// The option after the correct one (wrapping). Always wrong.
    #[default]
    FixedOffset,
    /// Uniform over all options, so correct with chance `1/n`.
    SeededRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Minimum presented glyph height, in pixels, for the target to be read.
    pub legibility_threshold_px: f64,
    /// Each reported box coordinate is offset by up to this much
    /// (normalized units), then clamped to the image.
    pub bbox_noise: f64,
    /// Probability that a stage-one reply omits the box.
    pub no_bbox_probability: f64,
    pub wrong_answer_policy: WrongAnswerPolicy,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            legibility_threshold_px: 12.0,
            bbox_noise: 0.0,
            no_bbox_probability: 0.0,
            wrong_answer_policy: WrongAnswerPolicy::FixedOffset,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), MockworldError> {
        if self.legibility_threshold_px.is_nan() || self.legibility_threshold_px <= 0.0 {
            return Err(MockworldError::Param("legibility_threshold_px must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.bbox_noise) {
            return Err(MockworldError::Param("bbox_noise must be within [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.no_bbox_probability) {
            return Err(MockworldError::Param("no_bbox_probability must be within [0, 1]".into()));
        }
        Ok(())
    }
}

/// Ground truth for a set of scenes, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct SceneRegistry {
    scenes: HashMap<String, SceneSpec>,
    digest: String,
}

impl SceneRegistry {
    pub fn new(scenes: Vec<SceneSpec>) -> Self {
        let mut sorted: Vec<&SceneSpec> = scenes.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let json = serde_json::to_string(&sorted).expect("scene specs serialize");
        let digest = sha256_hex(&[json.as_bytes()]);
        Self {
            scenes: scenes.into_iter().map(|s| (s.id.clone(), s)).collect(),
            digest,
        }
    }

    /// Reads a `scenes.jsonl` file written by the dataset generator.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MockworldError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut scenes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let spec: SceneSpec = serde_json::from_str(line).map_err(|e| MockworldError::Scenes {
                line: i + 1,
                message: e.to_string(),
            })?;
            scenes.push(spec);
        }
        Ok(Self::new(scenes))
    }

    pub fn get(&self, id: &str) -> Option<&SceneSpec> {
        self.scenes.get(id)
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }
}

/// What the oracle can see in one presented image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Legibility {
    pub contains_target: bool,
    pub presented_height_px: f64,
    pub legible: bool,
}

/// Legibility of `scene`'s target in an image showing `origin.region`
/// scaled to `presented_height` rows.
pub fn legibility(scene: &SceneSpec, origin: &Origin, presented_height: u32, threshold_px: f64) -> Legibility {
    let region = origin.region;
    let contains_target = region.contains(&scene.target_rect);
    let scale = if region.height() == 0 {
        0.0
    } else {
        presented_height as f64 / region.height() as f64
    };
    let presented_height_px = scene.target_size_px as f64 * scale;
    Legibility {
        contains_target,
        presented_height_px,
        legible: contains_target && presented_height_px >= threshold_px,
    }
}

/// Simulated multimodal model with a hard legibility limit.
///
/// It identifies the scene from the origin text chunk of each image, reads
/// the target correctly iff the glyph is in view and at least
/// `legibility_threshold_px` tall as presented, and otherwise answers per
/// [`WrongAnswerPolicy`]. Stage one (one image) also reports the target box.
/// Stage two (two images) answers from the crop when legible and otherwise
/// repeats its earlier answer. All randomness is keyed by `(seed, scene,
/// purpose)`, so replies do not depend on call order or concurrency.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    cfg: OracleConfig,
    registry: SceneRegistry,
}

impl OracleBackend {
    pub fn new(cfg: OracleConfig, registry: SceneRegistry) -> Result<Self, MockworldError> {
        cfg.validate()?;
        Ok(Self { cfg, registry })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &SceneRegistry {
        &self.registry
    }

    fn rng(&self, scene: &SceneSpec, purpose: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed_from(&[
            &self.cfg.seed.to_le_bytes(),
            scene.id.as_bytes(),
            purpose.as_bytes(),
        ]))
    }

    fn answer(&self, scene: &SceneSpec, legible: bool, purpose: &str) -> ChoiceLabel {
        if legible {
            return scene.answer;
        }
        let n = scene.option_count();
        let idx = match self.cfg.wrong_answer_policy {
            WrongAnswerPolicy::FixedOffset => (scene.answer.index() + 1) % n,
            WrongAnswerPolicy::SeededRandom => self.rng(scene, purpose).random_range(0..n),
        };
        ChoiceLabel::from_index(idx).expect("scene has at most five options")
    }

    fn reported_box(&self, scene: &SceneSpec) -> Option<NormBBox> {
        let mut rng = self.rng(scene, "bbox");
        if rng.random_bool(self.cfg.no_bbox_probability) {
            return None;
        }
        let noise = self.cfg.bbox_noise;
        let mut v = scene.target_bbox.to_array();
        if noise > 0.0 {
            for c in v.iter_mut() {
                *c = (*c + rng.random_range(-noise..=noise)).clamp(0.0, 1.0);
            }
        }
        NormBBox::repair(v).map(|(b, _)| b)
    }

    fn inspect(&self, data: &[u8]) -> Result<(EncodedInfo, Origin), BackendError> {
        let info = inspect_encoded(data).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let origin = info
            .origin
            .clone()
            .ok_or_else(|| BackendError::InvalidRequest("image carries no origin metadata".into()))?;
        Ok((info, origin))
    }

    fn scene(&self, origin: &Origin) -> Result<&SceneSpec, BackendError> {
        self.registry
            .get(&origin.image_id)
            .ok_or_else(|| BackendError::UnknownScene(origin.image_id.clone()))
    }

    fn stage_one(&self, scene: &SceneSpec, info: &EncodedInfo, origin: &Origin) -> (ChoiceLabel, Legibility) {
        let view = legibility(scene, origin, info.height, self.cfg.legibility_threshold_px);
        (self.answer(scene, view.legible, "stage1"), view)
    }
}

fn option_text(scene: &SceneSpec, label: ChoiceLabel) -> &str {
    &scene.options[label.index()]
}

impl ChatBackend for OracleBackend {
    fn complete(&self, conv: &Conversation) -> Result<ModelReply, BackendError> {
        conv.validate_for_submission()?;
        let images: Vec<_> = conv.images().collect();
        let text = match images.len() {
            1 => {
                let (info, origin) = self.inspect(&images[0].data)?;
                let scene = self.scene(&origin)?;
                let (label, view) = self.stage_one(scene, &info, &origin);
                let mut text = if view.legible {
                    format!("The sign clearly reads \"{}\".", option_text(scene, label))
                } else {
                    format!(
                        "The sign is too small to read reliably; it might be \"{}\".",
                        option_text(scene, label)
                    )
                };
                text.push_str(&format!("\nAnswer: ({label})"));
                if let Some(b) = self.reported_box(scene) {
                    text.push_str(&format!(
                        "\nRegion: [{:.6}, {:.6}, {:.6}, {:.6}]",
                        b.x1, b.y1, b.x2, b.y2
                    ));
                }
                text
            }
            2 => {
                let (info0, origin0) = self.inspect(&images[0].data)?;
                let scene = self.scene(&origin0)?;
                let (info1, origin1) = self.inspect(&images[1].data)?;
                if origin1.image_id != origin0.image_id {
                    return Err(BackendError::InvalidRequest(format!(
                        "images come from different scenes ({} and {})",
                        origin0.image_id, origin1.image_id
                    )));
                }
                let view = legibility(scene, &origin1, info1.height, self.cfg.legibility_threshold_px);
                if view.legible {
                    let label = scene.answer;
                    format!(
                        "The zoomed view shows the sign plainly: \"{}\".\nAnswer: ({label})",
                        option_text(scene, label)
                    )
                } else {
                    let options = label_options(&scene.options)?;
                    let prior = conv
                        .last_assistant_text()
                        .and_then(|t| parse_choice(t, &options))
                        .unwrap_or_else(|| self.stage_one(scene, &info0, &origin0).0);
                    format!("The zoomed view does not settle it; keeping my earlier reading.\nAnswer: ({prior})")
                }
            }
            n => {
                return Err(BackendError::InvalidRequest(format!(
                    "expected one or two images, got {n}"
                )))
            }
        };
        Ok(in_process_reply(conv, text))
    }

    fn fingerprint(&self) -> String {
        let cfg = serde_json::to_string(&self.cfg).expect("oracle config serializes");
        format!("oracle:{}:{}", &sha256_hex(&[cfg.as_bytes()])[..16], &self.registry.digest[..16])
    }
}
