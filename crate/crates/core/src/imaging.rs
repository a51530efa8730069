//! Raster images, the downsampling policy, and the crop operator.
//!
//! Boxes coming from a model are normalized fractions of the image. They are
//! realized as half-open pixel rectangles on the ORIGINAL image, grown about
//! their center, translated into bounds, and copied out without resampling.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};

/// Default longest side of the downsampled overview.
pub const DEFAULT_DOWNSAMPLE_MAX_SIDE: u32 = 1024;

/// PNG text keyword carrying the [`Origin`] of a transported image.
pub const ORIGIN_PNG_KEYWORD: &str = "zoomrefine-origin";

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("cannot decode {source_name}: {message}")]
    Decode { source_name: String, message: String },
    #[error("rect {rect} out of bounds for {width}x{height} image")]
    RectOutOfBounds {
        rect: PixelRect,
        width: u32,
        height: u32,
    },
    #[error("encode failed: {0}")]
    Encode(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("invalid crop policy: {0}")]
    InvalidPolicy(String),
}

/// Where an image came from: the id of the source image and the region of it
/// (in source pixel coordinates) that this raster depicts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub image_id: String,
    pub region: PixelRect,
}

/// Decoded 8-bit raster, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<u8>,
    pub source_path: Option<String>,
    pub origin: Option<Origin>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if !matches!(channels, 1 | 3 | 4) {
            return Err(ImagingError::InvalidImage(format!(
                "unsupported channel count {channels}"
            )));
        }
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(ImagingError::InvalidImage(format!(
                "buffer holds {} bytes, expected {expected}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
            source_path: None,
            origin: None,
        })
    }

    /// Solid-color image.
    pub fn filled(width: u32, height: u32, color: &[u8]) -> Result<Self, ImagingError> {
        let channels = color.len() as u8;
        let pixels = color
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * color.len())
            .collect();
        Self::new(width, height, channels, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.pixels[i..i + c]
    }

    pub fn full_rect(&self) -> PixelRect {
        PixelRect::new(0, 0, self.width, self.height)
    }

    /// Marks this image as the full extent of the source image `id`.
    pub fn with_origin_id(mut self, id: impl Into<String>) -> Self {
        self.origin = Some(Origin {
            image_id: id.into(),
            region: self.full_rect(),
        });
        self
    }
}

/// Normalized box `[x1, y1, x2, y2]`, fractions of width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Widening applied to zero-extent normalized boxes.
const DEGENERATE_EPS: f64 = 1e-6;

impl NormBBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, ImagingError> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(ImagingError::InvalidBox(format!("{b:?}")))
        }
    }

    pub fn full() -> Self {
        Self { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 }
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        in_unit(self.x1)
            && in_unit(self.y1)
            && in_unit(self.x2)
            && in_unit(self.y2)
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    /// Repairs a raw coordinate quadruple: sorts each axis and widens
    /// zero-extent axes toward the in-bounds side. Returns the box and whether
    /// anything was changed, or `None` when a coordinate is not a finite
    /// fraction in `[0, 1]`.
    pub fn repair(raw: [f64; 4]) -> Option<(Self, bool)> {
        if raw.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return None;
        }
        let mut repaired = false;
        let mut axis = |a: f64, b: f64| {
            let (mut lo, mut hi) = if a > b {
                repaired = true;
                (b, a)
            } else {
                (a, b)
            };
            if lo == hi {
                repaired = true;
                if hi + DEGENERATE_EPS <= 1.0 {
                    hi += DEGENERATE_EPS;
                } else {
                    lo -= DEGENERATE_EPS;
                }
            }
            (lo, hi)
        };
        let (x1, x2) = axis(raw[0], raw[2]);
        let (y1, y2) = axis(raw[1], raw[3]);
        Some((Self { x1, y1, x2, y2 }, repaired))
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Half-open pixel rectangle: `right` and `bottom` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub left: u32,
    pub top: u32,
    pub right: u32,
    pub bottom: u32,
}

impl PixelRect {
    pub fn new(left: u32, top: u32, right: u32, bottom: u32) -> Self {
        Self { left, top, right, bottom }
    }

    pub fn width(&self) -> u32 {
        self.right.saturating_sub(self.left)
    }

    pub fn height(&self) -> u32 {
        self.bottom.saturating_sub(self.top)
    }

    pub fn is_valid_for(&self, width: u32, height: u32) -> bool {
        self.left < self.right && self.top < self.bottom && self.right <= width && self.bottom <= height
    }

    pub fn contains(&self, other: &PixelRect) -> bool {
        self.left <= other.left
            && self.top <= other.top
            && self.right >= other.right
            && self.bottom >= other.bottom
    }

    /// Geometric center, in continuous pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.left as f64 + self.right as f64) / 2.0,
            (self.top as f64 + self.bottom as f64) / 2.0,
        )
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.left as f64 && x <= self.right as f64 && y >= self.top as f64 && y <= self.bottom as f64
    }
}

impl std::fmt::Display for PixelRect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})-({}, {})", self.left, self.top, self.right, self.bottom)
    }
}

/// How a localized box becomes the crop shown in the refinement stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropPolicy {
    /// Box is scaled about its center by this factor (≥ 1).
    pub expansion_factor: f64,
    /// Each side is then grown to at least this many pixels. 0 disables.
    pub min_side_px: u32,
    /// Crops larger than this are re-downsampled before transport.
    pub max_side_px: u32,
}

impl Default for CropPolicy {
    fn default() -> Self {
        Self {
            expansion_factor: 1.2,
            min_side_px: 448,
            max_side_px: 2048,
        }
    }
}

impl CropPolicy {
    pub fn validate(&self) -> Result<(), ImagingError> {
        if !(self.expansion_factor.is_finite() && self.expansion_factor >= 1.0) {
            return Err(ImagingError::InvalidPolicy(format!(
                "expansion_factor must be >= 1, got {}",
                self.expansion_factor
            )));
        }
        if self.max_side_px == 0 {
            return Err(ImagingError::InvalidPolicy("max_side_px must be >= 1".into()));
        }
        if self.min_side_px > self.max_side_px {
            return Err(ImagingError::InvalidPolicy(format!(
                "min_side_px {} exceeds max_side_px {}",
                self.min_side_px, self.max_side_px
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Decode / encode
// ---------------------------------------------------------------------------

/// Loads a PNG, JPEG or WebP file, applying EXIF orientation.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImagingError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(ImagingError::FileNotFound(path.to_path_buf()));
    }
    let name = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| ImagingError::Decode {
        source_name: name.clone(),
        message: e.to_string(),
    })?;
    let mut img = decode_named(&bytes, &name)?;
    img.source_path = Some(name);
    Ok(img)
}

/// Decodes an in-memory PNG, JPEG or WebP stream.
pub fn decode(bytes: &[u8]) -> Result<Image, ImagingError> {
    decode_named(bytes, "<memory>")
}

fn decode_named(bytes: &[u8], name: &str) -> Result<Image, ImagingError> {
    use image::ImageDecoder;

    let err = |e: image::ImageError| ImagingError::Decode {
        source_name: name.to_string(),
        message: e.to_string(),
    };
    let reader = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| ImagingError::Decode {
            source_name: name.to_string(),
            message: e.to_string(),
        })?;
    let mut decoder = reader.into_decoder().map_err(err)?;
    let orientation = decoder.orientation().map_err(err)?;
    let mut dynimg = image::DynamicImage::from_decoder(decoder).map_err(err)?;
    dynimg.apply_orientation(orientation);
    from_dynamic(dynimg)
}

fn from_dynamic(img: image::DynamicImage) -> Result<Image, ImagingError> {
    use image::DynamicImage as D;
    let (w, h) = (img.width(), img.height());
    match img {
        D::ImageLuma8(b) => Image::new(w, h, 1, b.into_raw()),
        D::ImageRgb8(b) => Image::new(w, h, 3, b.into_raw()),
        D::ImageRgba8(b) => Image::new(w, h, 4, b.into_raw()),
        D::ImageLuma16(_) => Image::new(w, h, 1, img.to_luma8().into_raw()),
        other if other.color().has_alpha() => Image::new(w, h, 4, other.to_rgba8().into_raw()),
        other => Image::new(w, h, 3, other.to_rgb8().into_raw()),
    }
}

/// Transport encoding of an image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase", deny_unknown_fields)]
pub enum ImageFormat {
    #[default]
    Png,
    Jpeg { quality: u8 },
}

impl ImageFormat {
    pub fn media_type(&self) -> &'static str {
        match self {
            ImageFormat::Png => "image/png",
            ImageFormat::Jpeg { .. } => "image/jpeg",
        }
    }
}

/// Encodes an image. PNG output carries the image's [`Origin`] (if any) as a
/// text chunk ahead of the pixel data.
pub fn encode(img: &Image, format: ImageFormat) -> Result<Vec<u8>, ImagingError> {
    match format {
        ImageFormat::Png => encode_png(img),
        ImageFormat::Jpeg { quality } => encode_jpeg(img, quality),
    }
}

fn encode_png(img: &Image) -> Result<Vec<u8>, ImagingError> {
    let enc_err = |e: png::EncodingError| ImagingError::Encode(e.to_string());
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width, img.height);
        enc.set_color(match img.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            _ => png::ColorType::Rgba,
        });
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Fast);
        if let Some(origin) = &img.origin {
            let text = serde_json::to_string(origin).map_err(|e| ImagingError::Encode(e.to_string()))?;
            enc.add_itxt_chunk(ORIGIN_PNG_KEYWORD.to_string(), text)
                .map_err(enc_err)?;
        }
        let mut writer = enc.write_header().map_err(enc_err)?;
        writer.write_image_data(&img.pixels).map_err(enc_err)?;
        writer.finish().map_err(enc_err)?;
    }
    Ok(out)
}

fn encode_jpeg(img: &Image, quality: u8) -> Result<Vec<u8>, ImagingError> {
    if !(1..=100).contains(&quality) {
        return Err(ImagingError::Encode(format!(
            "jpeg quality must be within 1..=100, got {quality}"
        )));
    }
    let mut out = Vec::new();
    let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality);
    // JPEG has no alpha; flatten RGBA by dropping the channel.
    let (buf, color) = match img.channels {
        1 => (img.pixels.clone(), image::ExtendedColorType::L8),
        3 => (img.pixels.clone(), image::ExtendedColorType::Rgb8),
        _ => (
            img.pixels
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
            image::ExtendedColorType::Rgb8,
        ),
    };
    use image::ImageEncoder;
    encoder
        .write_image(&buf, img.width, img.height, color)
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
    Ok(out)
}

/// Header-level facts about an encoded image, read without decoding pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInfo {
    pub width: u32,
    pub height: u32,
    pub origin: Option<Origin>,
}

/// Reads dimensions (and, for PNG, the origin text chunk) of an encoded image.
pub fn inspect_encoded(bytes: &[u8]) -> Result<EncodedInfo, ImagingError> {
    let decode_err = |m: String| ImagingError::Decode {
        source_name: "<memory>".into(),
        message: m,
    };
    if bytes.starts_with(b"\x89PNG") {
        let decoder = png::Decoder::new(Cursor::new(bytes));
        let reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
        let info = reader.info();
        let mut origin = None;
        for chunk in &info.utf8_text {
            if chunk.keyword == ORIGIN_PNG_KEYWORD {
                let text = chunk.get_text().map_err(|e| decode_err(e.to_string()))?;
                origin = Some(serde_json::from_str(&text).map_err(|e| decode_err(e.to_string()))?);
            }
        }
        return Ok(EncodedInfo {
            width: info.width,
            height: info.height,
            origin,
        });
    }
    let reader = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?;
    let (width, height) = reader.into_dimensions().map_err(|e| decode_err(e.to_string()))?;
    Ok(EncodedInfo {
        width,
        height,
        origin: None,
    })
}

// ---------------------------------------------------------------------------
// Downsampling
// ---------------------------------------------------------------------------

/// Output dimensions for a longest-side limit. The longest side becomes
/// `max_side`; the other is rounded half away from zero, minimum 1.
pub fn downsampled_dims(width: u32, height: u32, max_side: u32) -> (u32, u32) {
    let longest = width.max(height);
    if longest <= max_side {
        return (width, height);
    }
    let scale = |v: u32| -> u32 {
        let scaled = (v as f64 * max_side as f64 / longest as f64).round() as u32;
        scaled.clamp(1, max_side)
    };
    if width >= height {
        (max_side, scale(height))
    } else {
        (scale(width), max_side)
    }
}

/// Aspect-preserving area-average downsample so the longest side is at most
/// `max_side`. Images already within the limit are returned unchanged.
pub fn downsample(img: &Image, max_side: u32) -> Image {
    downsample_with(img, max_side, Execution::default())
}

pub fn downsample_with(img: &Image, max_side: u32, exec: Execution) -> Image {
    let max_side = max_side.max(1);
    let (out_w, out_h) = downsampled_dims(img.width, img.height, max_side);
    if (out_w, out_h) == (img.width, img.height) {
        return img.clone();
    }
    let c = img.channels as usize;
    let xw = area_weights(img.width as usize, out_w as usize);
    let yw = area_weights(img.height as usize, out_h as usize);

    // Horizontal pass: every source row to out_w columns.
    let src_row = img.width as usize * c;
    let mid_row = out_w as usize * c;
    let mut mid = vec![0f32; img.height as usize * mid_row];
    exec::for_each_row(exec, &mut mid, mid_row, |y, row| {
        let src = &img.pixels[y * src_row..(y + 1) * src_row];
        for (ox, taps) in xw.iter().enumerate() {
            let dst = &mut row[ox * c..(ox + 1) * c];
            for &(sx, w) in taps {
                let px = &src[sx * c..(sx + 1) * c];
                for ch in 0..c {
                    dst[ch] += px[ch] as f32 * w;
                }
            }
        }
    });

    // Vertical pass.
    let mut out = vec![0u8; out_h as usize * mid_row];
    exec::for_each_row(exec, &mut out, mid_row, |oy, row| {
        let mut acc = vec![0f32; mid_row];
        for &(sy, w) in &yw[oy] {
            let src = &mid[sy * mid_row..(sy + 1) * mid_row];
            for (a, s) in acc.iter_mut().zip(src) {
                *a += s * w;
            }
        }
        for (d, a) in row.iter_mut().zip(&acc) {
            *d = (a + 0.5).clamp(0.0, 255.0) as u8;
        }
    });

    Image {
        width: out_w,
        height: out_h,
        channels: img.channels,
        pixels: out,
        source_path: img.source_path.clone(),
        origin: img.origin.clone(),
    }
}

/// For each output cell, the source indices it overlaps and the normalized
/// overlap weights.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let start = o as f64 * scale;
            let end = ((o + 1) as f64 * scale).min(src as f64);
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(src);
            (first..last)
                .filter_map(|i| {
                    let overlap = (end.min(i as f64 + 1.0) - start.max(i as f64)).max(0.0);
                    (overlap > 0.0).then(|| (i, (overlap / (end - start)) as f32))
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

/// Realizes a normalized box on an image of the given size. Coordinates are
/// scaled and rounded half away from zero, clamped into bounds, and an empty
/// axis is widened by one pixel toward the in-bounds side.
pub fn denormalize_dims(b: &NormBBox, width: u32, height: u32) -> PixelRect {
    let axis = |lo: f64, hi: f64, extent: u32| -> (u32, u32) {
        let scale = |v: f64| ((v * extent as f64).round().max(0.0) as u32).min(extent);
        let (mut a, mut z) = (scale(lo.min(hi)), scale(lo.max(hi)));
        if z <= a {
            if a < extent {
                z = a + 1;
            } else {
                a = extent - 1;
                z = extent;
            }
        }
        (a, z)
    };
    let (left, right) = axis(b.x1, b.x2, width);
    let (top, bottom) = axis(b.y1, b.y2, height);
    PixelRect { left, top, right, bottom }
}

pub fn denormalize(b: &NormBBox, img: &Image) -> PixelRect {
    denormalize_dims(b, img.width, img.height)
}

/// Inverse of [`denormalize_dims`] up to rounding.
pub fn normalize(r: &PixelRect, width: u32, height: u32) -> NormBBox {
    NormBBox {
        x1: r.left as f64 / width as f64,
        y1: r.top as f64 / height as f64,
        x2: r.right as f64 / width as f64,
        y2: r.bottom as f64 / height as f64,
    }
}

/// Grows a rectangle about its center by `expansion_factor`, then to at
/// least `min_side_px` per side (capped at the image extent), then translates
/// it into bounds. The result always contains the input rectangle.
pub fn expand_and_clamp_dims(r: &PixelRect, policy: &CropPolicy, width: u32, height: u32) -> PixelRect {
    let factor = policy.expansion_factor.max(1.0);
    let axis = |lo: u32, hi: u32, extent: u32| -> (u32, u32) {
        let len = (hi - lo) as f64;
        let grown = (len * factor).round().max(len).max(policy.min_side_px as f64);
        let size = (grown as u32).clamp(1, extent);
        let center = (lo as f64 + hi as f64) / 2.0;
        let start = (center - size as f64 / 2.0).round();
        let start = if start < 0.0 {
            0
        } else {
            (start as u32).min(extent - size)
        };
        (start, start + size)
    };
    let (left, right) = axis(r.left, r.right, width);
    let (top, bottom) = axis(r.top, r.bottom, height);
    PixelRect { left, top, right, bottom }
}

pub fn expand_and_clamp(r: &PixelRect, policy: &CropPolicy, img: &Image) -> PixelRect {
    expand_and_clamp_dims(r, policy, img.width, img.height)
}

/// Exact pixel copy of `r` out of `img`.
pub fn crop(img: &Image, r: &PixelRect) -> Result<Image, ImagingError> {
    if !r.is_valid_for(img.width, img.height) {
        return Err(ImagingError::RectOutOfBounds {
            rect: *r,
            width: img.width,
            height: img.height,
        });
    }
    let c = img.channels as usize;
    let src_row = img.width as usize * c;
    let (x0, x1) = (r.left as usize * c, r.right as usize * c);
    let mut pixels = Vec::with_capacity(r.width() as usize * r.height() as usize * c);
    for y in r.top as usize..r.bottom as usize {
        pixels.extend_from_slice(&img.pixels[y * src_row + x0..y * src_row + x1]);
    }
    let origin = img.origin.as_ref().map(|o| Origin {
        image_id: o.image_id.clone(),
        region: map_into_region(&o.region, img.width, img.height, r),
    });
    Ok(Image {
        width: r.width(),
        height: r.height(),
        channels: img.channels,
        pixels,
        source_path: img.source_path.clone(),
        origin,
    })
}

/// Maps a rect in a raster's own pixel space into the source region that
/// raster depicts.
fn map_into_region(region: &PixelRect, width: u32, height: u32, r: &PixelRect) -> PixelRect {
    if region.width() == width && region.height() == height {
        return PixelRect::new(
            region.left + r.left,
            region.top + r.top,
            region.left + r.right,
            region.top + r.bottom,
        );
    }
    let sx = region.width() as f64 / width as f64;
    let sy = region.height() as f64 / height as f64;
    let map = |v: u32, s: f64, base: u32| base + (v as f64 * s).round() as u32;
    PixelRect::new(
        map(r.left, sx, region.left),
        map(r.top, sy, region.top),
        map(r.right, sx, region.left),
        map(r.bottom, sy, region.top),
    )
}
