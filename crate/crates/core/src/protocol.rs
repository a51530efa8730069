//! Prompt templates, conversation assembly, and reply parsing.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::imaging::{self, Image, ImageFormat, ImagingError, NormBBox};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("question must not be empty")]
    EmptyQuestion,
    #[error("template error in section `{section}`: {message}")]
    Template { section: String, message: String },
    #[error("stage-one assistant reply is missing")]
    MissingReply,
    #[error("invalid conversation: {0}")]
    InvalidConversation(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

fn template_err(section: &str, message: impl Into<String>) -> ProtocolError {
    ProtocolError::Template {
        section: section.to_string(),
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// Choices
// ---------------------------------------------------------------------------

/// Multiple-choice label, `A` through `E`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChoiceLabel(char);

pub const MAX_OPTIONS: usize = 5;

impl ChoiceLabel {
    pub fn new(c: char) -> Option<Self> {
        ('A'..='E').contains(&c).then_some(Self(c))
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < MAX_OPTIONS).then(|| Self((b'A' + i as u8) as char))
    }

    pub fn index(self) -> usize {
        (self.0 as u8 - b'A') as usize
    }

    pub fn as_char(self) -> char {
        self.0
    }
}

impl fmt::Display for ChoiceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for ChoiceLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_char(self.0)
    }
}

impl<'de> Deserialize<'de> for ChoiceLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => ChoiceLabel::new(c)
                .ok_or_else(|| serde::de::Error::custom(format!("choice label must be A-E, got {s:?}"))),
            _ => Err(serde::de::Error::custom(format!(
                "choice label must be a single letter, got {s:?}"
            ))),
        }
    }
}

/// One labeled answer option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: ChoiceLabel,
    pub text: String,
}

/// Labels option texts `A`, `B`, ... in order.
pub fn label_options<S: AsRef<str>>(texts: &[S]) -> Result<Vec<AnswerOption>, ProtocolError> {
    if texts.is_empty() || texts.len() > MAX_OPTIONS {
        return Err(ProtocolError::InvalidOptions(format!(
            "expected 1 to {MAX_OPTIONS} options, got {}",
            texts.len()
        )));
    }
    Ok(texts
        .iter()
        .enumerate()
        .map(|(i, t)| AnswerOption {
            label: ChoiceLabel::from_index(i).expect("bounded above"),
            text: t.as_ref().to_string(),
        })
        .collect())
}

pub fn format_options(options: &[AnswerOption]) -> String {
    options
        .iter()
        .map(|o| format!("({}) {}", o.label, o.text))
        .collect::<Vec<_>>()
        .join("\n")
}

// ---------------------------------------------------------------------------
// Conversation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// An encoded image attached to a user turn.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageAttachment {
    pub media_type: String,
    pub data: Vec<u8>,
}

impl fmt::Debug for ImageAttachment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageAttachment")
            .field("media_type", &self.media_type)
            .field("bytes", &self.data.len())
            .finish()
    }
}

impl ImageAttachment {
    pub fn encode(img: &Image, format: ImageFormat) -> Result<Self, ImagingError> {
        Ok(Self {
            media_type: format.media_type().to_string(),
            data: imaging::encode(img, format)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    pub images: Vec<ImageAttachment>,
}

impl Turn {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn user(text: impl Into<String>, images: Vec<ImageAttachment>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
            images: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Conversation {
    pub turns: Vec<Turn>,
}

impl Conversation {
    pub fn new(turns: Vec<Turn>) -> Self {
        Self { turns }
    }

    /// Structural checks: at most one system turn and only first; no images
    /// on system or assistant turns; user/assistant alternate after it.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidConversation(m));
        let mut expect_user = true;
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.role != Role::User && !turn.images.is_empty() {
                return bad(format!("turn {i} ({:?}) carries images", turn.role));
            }
            match turn.role {
                Role::System if i == 0 => {}
                Role::System => return bad(format!("system turn at position {i}")),
                Role::User if expect_user => expect_user = false,
                Role::Assistant if !expect_user => expect_user = true,
                role => return bad(format!("turn {i} breaks alternation ({role:?})")),
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus: ends with a user turn.
    pub fn validate_for_submission(&self) -> Result<(), ProtocolError> {
        self.validate()?;
        match self.turns.last() {
            Some(t) if t.role == Role::User => Ok(()),
            _ => Err(ProtocolError::InvalidConversation(
                "conversation must end with a user turn".into(),
            )),
        }
    }

    pub fn image_count(&self) -> usize {
        self.turns.iter().map(|t| t.images.len()).sum()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageAttachment> {
        self.turns.iter().flat_map(|t| t.images.iter())
    }

    /// Indices of turns that carry at least one image.
    pub fn image_turns(&self) -> Vec<usize> {
        self.turns
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.images.is_empty())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn last_assistant_text(&self) -> Option<&str> {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::Assistant)
            .map(|t| t.text.as_str())
    }
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// The built-in template file.
pub const DEFAULT_TEMPLATE_FILE: &str = include_str!("../templates/default.txt");

/// Prompt templates. `localized_zoom` asks for a preliminary answer plus a
/// normalized box; `self_refine` asks the model to compare the crop against
/// its earlier reasoning and reaffirm or revise; `baseline` is the
/// single-pass prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub system: String,
    pub localized_zoom: String,
    pub self_refine: String,
    pub baseline: String,
}

const SECTIONS: [&str; 4] = ["system", "localized_zoom", "self_refine", "baseline"];

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE_FILE).expect("built-in templates are valid")
    }
}

#[derive(Debug, PartialEq)]
enum Piece<'a> {
    Text(&'a str),
    Brace(char),
    Placeholder(&'a str),
}

fn tokenize<'a>(section: &str, template: &'a str) -> Result<Vec<Piece<'a>>, ProtocolError> {
    let mut pieces = Vec::new();
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        if pos > 0 {
            pieces.push(Piece::Text(&rest[..pos]));
        }
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            pieces.push(Piece::Brace('{'));
            rest = after;
        } else if let Some(after) = tail.strip_prefix("}}") {
            pieces.push(Piece::Brace('}'));
            rest = after;
        } else if let Some(after) = tail.strip_prefix('}') {
            pieces.push(Piece::Brace('}'));
            rest = after;
        } else {
            let close = tail
                .find('}')
                .ok_or_else(|| template_err(section, "unclosed `{`"))?;
            let name = &tail[1..close];
            if name != "question" && name != "options" {
                return Err(template_err(section, format!("unknown placeholder {{{name}}}")));
            }
            pieces.push(Piece::Placeholder(name));
            rest = &tail[close + 1..];
        }
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest));
    }
    Ok(pieces)
}

fn placeholders(section: &str, template: &str) -> Result<BTreeSet<String>, ProtocolError> {
    Ok(tokenize(section, template)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Placeholder(n) => Some(n.to_string()),
            _ => None,
        })
        .collect())
}

fn fill(section: &str, template: &str, question: &str, options: &str) -> Result<String, ProtocolError> {
    let mut out = String::with_capacity(template.len() + question.len() + options.len());
    for piece in tokenize(section, template)? {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Brace(c) => out.push(c),
            Piece::Placeholder("question") => out.push_str(question),
            Piece::Placeholder(_) => out.push_str(options),
        }
    }
    Ok(out)
}

impl PromptTemplates {
    /// Parses a template file: `=== name ===` headers, `#` comments before
    /// the first header, section bodies trimmed of surrounding blank lines.
    /// `baseline` is optional and defaults to the built-in one.
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let mut sections: Vec<(String, Vec<&str>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if let Some(name) = trimmed
                .strip_prefix("===")
                .and_then(|s| s.strip_suffix("==="))
                .map(str::trim)
            {
                if !SECTIONS.contains(&name) {
                    return Err(template_err(name, format!("unknown section on line {}", lineno + 1)));
                }
                if sections.iter().any(|(n, _)| n == name) {
                    return Err(template_err(name, "duplicate section"));
                }
                sections.push((name.to_string(), Vec::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push(line);
            } else if !(trimmed.is_empty() || trimmed.starts_with('#')) {
                return Err(template_err(
                    "<preamble>",
                    format!("text before first section on line {}", lineno + 1),
                ));
            }
        }
        let get = |name: &str| -> Option<String> {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, lines)| lines.join("\n").trim_matches('\n').trim_end().to_string())
        };
        let required = |name: &str| get(name).ok_or_else(|| template_err(name, "missing section"));
        let templates = Self {
            system: required("system")?,
            localized_zoom: required("localized_zoom")?,
            self_refine: required("self_refine")?,
            baseline: match get("baseline") {
                Some(b) => b,
                None => Self::parse(DEFAULT_TEMPLATE_FILE)?.baseline,
            },
        };
        templates.validate()?;
        Ok(templates)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ProtocolError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| template_err("<file>", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Renders back to the file grammar.
    pub fn to_file_string(&self) -> String {
        format!(
            "=== system ===\n{}\n\n=== localized_zoom ===\n{}\n\n=== self_refine ===\n{}\n\n=== baseline ===\n{}\n",
            self.system, self.localized_zoom, self.self_refine, self.baseline
        )
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !placeholders("system", &self.system)?.is_empty() {
            return Err(template_err("system", "system prompt takes no placeholders"));
        }
        for (name, body) in [("localized_zoom", &self.localized_zoom), ("baseline", &self.baseline)] {
            let found = placeholders(name, body)?;
            for needed in ["question", "options"] {
                if !found.contains(needed) {
                    return Err(template_err(name, format!("missing {{{needed}}} placeholder")));
                }
            }
        }
        placeholders("self_refine", &self.self_refine)?;
        Ok(())
    }

    /// SHA-256 over all sections, recorded in traces.
    pub fn hash(&self) -> String {
        sha256_hex(&[
            self.system.as_bytes(),
            self.localized_zoom.as_bytes(),
            self.self_refine.as_bytes(),
            self.baseline.as_bytes(),
        ])
    }
}

// ---------------------------------------------------------------------------
// Conversation builders
// ---------------------------------------------------------------------------

fn check_question(question: &str) -> Result<(), ProtocolError> {
    if question.trim().is_empty() {
        Err(ProtocolError::EmptyQuestion)
    } else {
        Ok(())
    }
}

fn single_view_request(
    body: &str,
    section: &str,
    img: &Image,
    question: &str,
    options: &[AnswerOption],
    t: &PromptTemplates,
    format: ImageFormat,
) -> Result<Conversation, ProtocolError> {
    check_question(question)?;
    t.validate()?;
    let text = fill(section, body, question, &format_options(options))?;
    Ok(Conversation::new(vec![
        Turn::system(t.system.clone()),
        Turn::user(text, vec![ImageAttachment::encode(img, format)?]),
    ]))
}

/// Stage one: system turn plus a user turn carrying the downsampled view and
/// the localization prompt.
pub fn render_zoom_request(
    img_ds: &Image,
    question: &str,
    options: &[AnswerOption],
    t: &PromptTemplates,
    format: ImageFormat,
) -> Result<Conversation, ProtocolError> {
    single_view_request(&t.localized_zoom, "localized_zoom", img_ds, question, options, t, format)
}

/// Single-pass request used by baseline mode.
pub fn render_baseline_request(
    img_ds: &Image,
    question: &str,
    options: &[AnswerOption],
    t: &PromptTemplates,
    format: ImageFormat,
) -> Result<Conversation, ProtocolError> {
    single_view_request(&t.baseline, "baseline", img_ds, question, options, t, format)
}

/// Stage two: the stage-one transcript, the full stage-one reply (reasoning
/// included), and a user turn carrying the crop and the refinement prompt.
pub fn build_refine_conversation(
    stage1: &Conversation,
    reply1: &str,
    crop: &Image,
    question: &str,
    options: &[AnswerOption],
    t: &PromptTemplates,
    format: ImageFormat,
) -> Result<Conversation, ProtocolError> {
    if reply1.trim().is_empty() {
        return Err(ProtocolError::MissingReply);
    }
    check_question(question)?;
    stage1.validate_for_submission()?;
    if stage1.image_count() != 1 {
        return Err(ProtocolError::InvalidConversation(format!(
            "stage-one transcript must carry exactly one image, found {}",
            stage1.image_count()
        )));
    }
    let text = fill("self_refine", &t.self_refine, question, &format_options(options))?;
    let mut turns = stage1.turns.clone();
    turns.push(Turn::assistant(reply1));
    turns.push(Turn::user(text, vec![ImageAttachment::encode(crop, format)?]));
    Ok(Conversation::new(turns))
}

// ---------------------------------------------------------------------------
// Reply parsing
// ---------------------------------------------------------------------------

/// Stage-one reply: preliminary answer and optional localized box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedZoomReply {
    pub preliminary_answer: Option<ChoiceLabel>,
    pub bbox: Option<NormBBox>,
    pub raw_text: String,
    pub bbox_repaired: bool,
}

const NUM: &str = r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?";

static BBOX_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"\[\s*({NUM})\s*,\s*({NUM})\s*,\s*({NUM})\s*,\s*({NUM})\s*\]"
    ))
    .expect("valid regex")
});

static ANSWER_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i:\banswer(?:\s+is)?)\s*:?\s*\**\s*\(?\s*([A-Z])\b").expect("valid regex")
});

static LONE_LETTER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\**\(?([A-Z])\)?[.:)]?\**$").expect("valid regex"));

/// Formats a box the way the localization prompt asks for it.
pub fn format_bbox(b: &NormBBox) -> String {
    format!("[{}, {}, {}, {}]", b.x1, b.y1, b.x2, b.y2)
}

/// Extracts the last `[f, f, f, f]` group. Values all within 0-1 are
/// fractions; values all within 0-100 with any above 1 are percentages.
/// Anything else yields no box. Never panics.
pub fn parse_zoom_reply(text: &str, options: &[AnswerOption]) -> ParsedZoomReply {
    let mut bbox = None;
    let mut bbox_repaired = false;
    if let Some(caps) = BBOX_RE.captures_iter(text).last() {
        let mut vals = [0f64; 4];
        let mut ok = true;
        for (i, v) in vals.iter_mut().enumerate() {
            match caps[i + 1].parse::<f64>() {
                Ok(x) if x.is_finite() => *v = x,
                _ => ok = false,
            }
        }
        if ok {
            let in_range = |hi: f64| vals.iter().all(|v| (0.0..=hi).contains(v));
            let scaled = if in_range(1.0) {
                Some(vals)
            } else if in_range(100.0) {
                Some(vals.map(|v| v / 100.0))
            } else {
                None
            };
            if let Some((b, repaired)) = scaled.and_then(NormBBox::repair) {
                bbox = Some(b);
                bbox_repaired = repaired;
            }
        }
    }
    ParsedZoomReply {
        preliminary_answer: parse_choice(text, options),
        bbox,
        raw_text: text.to_string(),
        bbox_repaired,
    }
}

/// Answer extraction, in precedence order:
/// 1. the last `answer is (X)` / `Answer: X` naming an offered label;
/// 2. a single distinct option letter standing alone on a line;
/// 3. exactly one option whose full text occurs (case-insensitively).
pub fn parse_choice(text: &str, options: &[AnswerOption]) -> Option<ChoiceLabel> {
    let offered = |c: char| options.iter().find(|o| o.label.as_char() == c).map(|o| o.label);

    if let Some(label) = ANSWER_RE
        .captures_iter(text)
        .filter_map(|c| c[1].chars().next().and_then(offered))
        .last()
    {
        return Some(label);
    }

    let lone: BTreeSet<ChoiceLabel> = text
        .lines()
        .filter_map(|l| LONE_LETTER_RE.captures(l.trim()))
        .filter_map(|c| c[1].chars().next().and_then(offered))
        .collect();
    if lone.len() == 1 {
        return lone.into_iter().next();
    }

    let lower = text.to_lowercase();
    let mut hits = options
        .iter()
        .filter(|o| !o.text.trim().is_empty() && lower.contains(&o.text.trim().to_lowercase()));
    match (hits.next(), hits.next()) {
        (Some(o), None) => Some(o.label),
        _ => None,
    }
}
