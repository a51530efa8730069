use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::font;
use super::MockworldError;
use crate::bench::{BenchmarkRecord, Task};
use crate::digest::seed_from;
use crate::exec::{self, Execution};
use crate::imaging::{self, Image, ImageFormat, NormBBox, PixelRect};
use crate::protocol::ChoiceLabel;

pub const OPTION_COUNT: usize = 4;
pub const TARGET_QUESTION: &str = "Which character is printed on the small white sign?";

/// Ink color of the target glyph. Nothing else in a scene uses it.
pub const TARGET_INK: [u8; 3] = [0, 0, 0];
const PLATE: [u8; 3] = [255, 255, 255];

/// Ground truth for one generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub seed: u64,
    pub canvas_side: u32,
    pub target_glyph: char,
    /// Glyph height in the original image.
    pub target_size_px: u32,
    /// Glyph ink box in original pixels.
    pub target_rect: PixelRect,
    pub target_bbox: NormBBox,
    pub distractor_count: u32,
    pub question: String,
    pub options: Vec<String>,
    pub answer: ChoiceLabel,
    pub subtask: String,
}

impl SceneSpec {
    pub fn option_count(&self) -> usize {
        self.options.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub canvas_side: u32,
    pub target_size_px: u32,
    pub distractor_count: u32,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            canvas_side: 4096,
            target_size_px: 24,
            distractor_count: 24,
        }
    }
}

impl SceneParams {
    fn margin(&self) -> u32 {
        (self.target_size_px / 4).max(2)
    }

    pub fn validate(&self) -> Result<(), MockworldError> {
        if self.canvas_side < 64 {
            return Err(MockworldError::Param(format!(
                "canvas_side must be >= 64, got {}",
                self.canvas_side
            )));
        }
        if self.target_size_px < 8 {
            return Err(MockworldError::Param(format!(
                "target_size_px must be >= 8, got {}",
                self.target_size_px
            )));
        }
        if 2 * (self.target_size_px + 2 * self.margin()) > self.canvas_side {
            return Err(MockworldError::Param(format!(
                "target_size_px {} too large for a {} canvas",
                self.target_size_px, self.canvas_side
            )));
        }
        Ok(())
    }
}

fn fill_rect(img: &mut [u8], side: u32, r: &PixelRect, color: [u8; 3]) {
    let row = side as usize * 3;
    for y in r.top..r.bottom {
        let base = y as usize * row;
        for x in r.left..r.right {
            let i = base + x as usize * 3;
            img[i..i + 3].copy_from_slice(&color);
        }
    }
}

fn draw_glyph(img: &mut [u8], side: u32, c: char, rect: &PixelRect, color: [u8; 3]) {
    let row = side as usize * 3;
    let (w, h) = (rect.width(), rect.height());
    for y in 0..h {
        for x in 0..w {
            if font::is_ink(c, w, h, x, y) {
                let i = (rect.top + y) as usize * row + (rect.left + x) as usize * 3;
                img[i..i + 3].copy_from_slice(&color);
            }
        }
    }
}

fn muted(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [
        rng.random_range(40..=220),
        rng.random_range(40..=220),
        rng.random_range(40..=220),
    ]
}

/// Renders one scene: a gradient-and-grid background, colored rectangles and
/// gray glyphs as distractors, and the target glyph in black on a white
/// plate. Deterministic in `(params, seed)`.
pub fn gen_scene(
    id: &str,
    params: &SceneParams,
    seed: u64,
    image_path: &Path,
    exec: Execution,
) -> Result<(Image, BenchmarkRecord, SceneSpec), MockworldError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = params.canvas_side;

    // Background.
    let tint = muted(&mut rng);
    let grid = 32 + rng.random_range(0..96u32);
    let mut px = vec![0u8; side as usize * side as usize * 3];
    exec::for_each_row(exec, &mut px, side as usize * 3, |y, row| {
        let y = y as u32;
        for x in 0..side {
            let on_grid = x.is_multiple_of(grid) || y.is_multiple_of(grid);
            let g = ((x + y) * 96 / (2 * side)) as u8;
            for ch in 0..3 {
                let base = tint[ch] / 2 + 40 + g;
                row[x as usize * 3 + ch] = if on_grid { base.saturating_sub(25).max(30) } else { base };
            }
        }
    });

    // Target placement, chosen before distractors so the rng stream is fixed.
    let h = params.target_size_px;
    let w = font::glyph_width(h);
    let m = params.margin();
    let plate_w = w + 2 * m;
    let plate_h = h + 2 * m;
    let px0 = rng.random_range(m..=side - plate_w - m);
    let py0 = rng.random_range(m..=side - plate_h - m);
    let plate = PixelRect::new(px0, py0, px0 + plate_w, py0 + plate_h);
    let target_rect = PixelRect::new(px0 + m, py0 + m, px0 + m + w, py0 + m + h);

    let glyph_index = rng.random_range(0..font::alphabet_len());
    let target_glyph = font::glyph_at(glyph_index);
    let mut choices: Vec<usize> = (0..font::alphabet_len()).filter(|&i| i != glyph_index).collect();
    choices.shuffle(&mut rng);
    let mut option_glyphs: Vec<char> = choices[..OPTION_COUNT - 1].iter().map(|&i| font::glyph_at(i)).collect();
    option_glyphs.push(target_glyph);
    option_glyphs.shuffle(&mut rng);
    let answer_index = option_glyphs.iter().position(|&c| c == target_glyph).expect("target is an option");

    // Distractors.
    for _ in 0..params.distractor_count {
        let dw = rng.random_range(side / 64..=side / 8).max(2);
        let dh = rng.random_range(side / 64..=side / 8).max(2);
        let x = rng.random_range(0..side - dw);
        let y = rng.random_range(0..side - dh);
        let rect = PixelRect::new(x, y, x + dw, y + dh);
        fill_rect(&mut px, side, &rect, muted(&mut rng));
        if rng.random_bool(0.5) {
            let gh = rng.random_range(8..=(dh.min(dw * 7 / 5)).max(8)).min(dh);
            let gw = font::glyph_width(gh).min(dw);
            let g = font::glyph_at(rng.random_range(0..font::alphabet_len()));
            let shade = rng.random_range(70..=120);
            draw_glyph(&mut px, side, g, &PixelRect::new(x, y, x + gw, y + gh), [shade; 3]);
        }
    }

    fill_rect(&mut px, side, &plate, PLATE);
    draw_glyph(&mut px, side, target_glyph, &target_rect, TARGET_INK);

    let image = Image::new(side, side, 3, px).expect("buffer sized for canvas");
    let target_bbox = imaging::normalize(&target_rect, side, side);
    let options: Vec<String> = option_glyphs.iter().map(|c| c.to_string()).collect();
    let answer = ChoiceLabel::from_index(answer_index).expect("4 options");
    let subtask = "text".to_string();
    let record = BenchmarkRecord {
        id: id.to_string(),
        image: image_path.to_path_buf(),
        question: TARGET_QUESTION.to_string(),
        options: options.clone(),
        answer,
        task: Task::Perception,
        subtask: subtask.clone(),
    };
    let spec = SceneSpec {
        id: id.to_string(),
        seed,
        canvas_side: side,
        target_glyph,
        target_size_px: h,
        target_rect,
        target_bbox,
        distractor_count: params.distractor_count,
        question: TARGET_QUESTION.to_string(),
        options,
        answer,
        subtask,
    };
    Ok((image, record, spec))
}

/// Parameters of a generated dataset. The first `small_count` scenes use
/// `small_target_px`, the rest `large_target_px`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub count: usize,
    pub small_count: usize,
    pub canvas_side: u32,
    pub small_target_px: u32,
    pub large_target_px: u32,
    pub distractor_count: u32,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            count: 200,
            small_count: 100,
            canvas_side: 4096,
            small_target_px: 24,
            large_target_px: 64,
            distractor_count: 24,
            seed: 7,
        }
    }
}

pub const SMALL_SUBTASK: &str = "small-text";
pub const LARGE_SUBTASK: &str = "large-text";

/// Files written by [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub root: PathBuf,
    pub dataset_path: PathBuf,
    pub scenes_path: PathBuf,
    pub records: Vec<BenchmarkRecord>,
    pub scenes: Vec<SceneSpec>,
}

pub fn scene_id(i: usize) -> String {
    format!("scene-{i:05}")
}

/// Writes `images/`, `dataset.jsonl` and `scenes.jsonl` under `root`.
pub fn generate_dataset(
    root: &Path,
    params: &DatasetParams,
    exec: Execution,
) -> Result<GeneratedDataset, MockworldError> {
    if params.small_count > params.count {
        return Err(MockworldError::Param("small_count exceeds count".into()));
    }
    let images_dir = root.join("images");
    fs::create_dir_all(&images_dir)?;
    let generated = exec::map_range(exec, params.count, |i| -> Result<_, MockworldError> {
        let id = scene_id(i);
        let target = if i < params.small_count {
            params.small_target_px
        } else {
            params.large_target_px
        };
        let scene_params = SceneParams {
            canvas_side: params.canvas_side,
            target_size_px: target,
            distractor_count: params.distractor_count,
        };
        let rel = PathBuf::from("images").join(format!("{id}.png"));
        let seed = seed_from(&[&params.seed.to_le_bytes(), &(i as u64).to_le_bytes()]);
        // Scenes are rendered one at a time inside the outer loop.
        let (img, mut record, mut spec) = gen_scene(&id, &scene_params, seed, &rel, Execution::Sequential)?;
        let subtask = if i < params.small_count { SMALL_SUBTASK } else { LARGE_SUBTASK };
        record.subtask = subtask.to_string();
        spec.subtask = subtask.to_string();
        fs::write(root.join(&rel), imaging::encode(&img, ImageFormat::Png)?)?;
        Ok((record, spec))
    });
    let mut records = Vec::with_capacity(params.count);
    let mut scenes = Vec::with_capacity(params.count);
    for g in generated {
        let (r, s) = g?;
        records.push(r);
        scenes.push(s);
    }
    let dataset_path = root.join("dataset.jsonl");
    let scenes_path = root.join("scenes.jsonl");
    write_jsonl(&dataset_path, &records)?;
    write_jsonl(&scenes_path, &scenes)?;
    Ok(GeneratedDataset {
        root: root.to_path_buf(),
        dataset_path,
        scenes_path,
        records,
        scenes,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), MockworldError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| MockworldError::Param(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
