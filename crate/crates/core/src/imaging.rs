//! Image preprocessing (recompression, slicing, dimension checks) and
//! post-processing (drawing detection boxes).
//!
//! Everything here is a pure function over owned buffers, so any number of
//! pipeline runs may call into it concurrently.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::detection::Detection;

/// JPEG quality used by the preprocessing step.
pub const DEFAULT_JPEG_QUALITY: u8 = 30;

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("cannot encode image: {0}")]
    Encode(String),
    #[error("jpeg quality {0} outside 1..=100")]
    BadQuality(u8),
    #[error("cannot cut an image of width {width} into {k} slices")]
    BadSliceCount { k: u32, width: u32 },
    #[error("invalid image buffer: {0}")]
    InvalidBuffer(String),
}

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidBuffer(format!("zero dimension {width}x{height}")));
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(ImagingError::InvalidBuffer(format!(
                "{} bytes for {width}x{height} (expected {expected})",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Image of a single color. Panics on a zero dimension.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let data = rgb.repeat(width as usize * height as usize);
        Self { width, height, data }
    }

    /// Decodes JPEG or PNG bytes into RGB.
    pub fn decode(bytes: &[u8]) -> Result<Self, ImagingError> {
        let format = image::guess_format(bytes).map_err(|e| ImagingError::Decode(e.to_string()))?;
        if !matches!(format, ImageFormat::Jpeg | ImageFormat::Png) {
            return Err(ImagingError::Decode(format!("unsupported format {format:?}")));
        }
        let decoded =
            image::load_from_memory_with_format(bytes, format).map_err(|e| ImagingError::Decode(e.to_string()))?;
        Ok(Self::from_rgb8(decoded.to_rgb8()))
    }

    pub fn from_rgb8(img: RgbImage) -> Self {
        let (width, height) = img.dimensions();
        Self {
            width,
            height,
            data: img.into_raw(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.data.clone()).expect("buffer length is an invariant")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.offset(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        assert!(x < self.width && y < self.height, "pixel ({x}, {y}) out of bounds");
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn encode_jpeg(&self, quality: u8) -> Result<Vec<u8>, ImagingError> {
        if !(1..=100).contains(&quality) {
            return Err(ImagingError::BadQuality(quality));
        }
        let mut out = Vec::new();
        JpegEncoder::new_with_quality(&mut out, quality)
            .write_image(&self.data, self.width, self.height, ExtendedColorType::Rgb8)
            .map_err(|e| ImagingError::Encode(e.to_string()))?;
        Ok(out)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImagingError> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| ImagingError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }
}

/// Re-encodes JPEG/PNG bytes as a JPEG at `quality`.
pub fn compress_jpeg(image_bytes: &[u8], quality: u8) -> Result<Vec<u8>, ImagingError> {
    if !(1..=100).contains(&quality) {
        return Err(ImagingError::BadQuality(quality));
    }
    Image::decode(image_bytes)?.encode_jpeg(quality)
}

/// Cuts `image` into `k` full-height vertical strips.
///
/// The first `k - 1` strips are `width / k` pixels wide; the last one takes the
/// remainder.
pub fn slice_vertical(image: &Image, k: u32) -> Result<Vec<Image>, ImagingError> {
    if k == 0 || image.width < k {
        return Err(ImagingError::BadSliceCount { k, width: image.width });
    }
    let base = image.width / k;
    let row_len = image.width as usize * 3;
    let mut slices = Vec::with_capacity(k as usize);
    for i in 0..k {
        let x0 = i * base;
        let w = if i == k - 1 { image.width - x0 } else { base };
        let mut data = Vec::with_capacity(w as usize * image.height as usize * 3);
        for row in image.data.chunks_exact(row_len) {
            data.extend_from_slice(&row[x0 as usize * 3..(x0 + w) as usize * 3]);
        }
        slices.push(Image {
            width: w,
            height: image.height,
            data,
        });
    }
    Ok(slices)
}

/// Joins equal-height images left to right. Inverse of [`slice_vertical`].
pub fn concat_horizontal(parts: &[Image]) -> Result<Image, ImagingError> {
    let first = parts
        .first()
        .ok_or_else(|| ImagingError::InvalidBuffer("nothing to concatenate".into()))?;
    let height = first.height;
    if parts.iter().any(|p| p.height != height) {
        return Err(ImagingError::InvalidBuffer("slices differ in height".into()));
    }
    let width: u32 = parts.iter().map(|p| p.width).sum();
    let mut data = Vec::with_capacity(width as usize * height as usize * 3);
    for y in 0..height as usize {
        for p in parts {
            let row = p.width as usize * 3;
            data.extend_from_slice(&p.data[y * row..(y + 1) * row]);
        }
    }
    Image::new(width, height, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum DimCheck {
    Pass,
    Fail { actual_width: u32, actual_height: u32 },
}

impl DimCheck {
    pub fn passed(&self) -> bool {
        matches!(self, DimCheck::Pass)
    }
}

pub fn validate_dims(image: &Image, expected_width: u32, expected_height: u32) -> DimCheck {
    if image.width == expected_width && image.height == expected_height {
        DimCheck::Pass
    } else {
        DimCheck::Fail {
            actual_width: image.width,
            actual_height: image.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoxStyle {
    pub thickness: u32,
    pub color: [u8; 3],
    pub label: bool,
}

impl Default for BoxStyle {
    fn default() -> Self {
        Self {
            thickness: 2,
            color: [255, 0, 0],
            label: false,
        }
    }
}

/// Draws each detection as a rectangle outline on a copy of `image`.
///
/// Normalized corners are scaled by the image size and rounded half up, then
/// clamped to the last row/column. Strokes grow inward from the outline. With
/// `style.label` set, the label and score are printed in a 3x5 pixel font just
/// above the box (or inside it when there is no room above).
pub fn render_boxes(image: &Image, detections: &[Detection], style: &BoxStyle) -> Image {
    let mut out = image.clone();
    for det in detections {
        let (x0, x1) = denormalize(det.bbox.top_x(), det.bbox.bottom_x(), image.width);
        let (y0, y1) = denormalize(det.bbox.top_y(), det.bbox.bottom_y(), image.height);
        for k in 0..style.thickness {
            let (left, right) = (x0 + k, x1.saturating_sub(k));
            let (top, bottom) = (y0 + k, y1.saturating_sub(k));
            if left > right || top > bottom {
                break;
            }
            for x in left..=right {
                out.set_pixel(x, top, style.color);
                out.set_pixel(x, bottom, style.color);
            }
            for y in top..=bottom {
                out.set_pixel(left, y, style.color);
                out.set_pixel(right, y, style.color);
            }
        }
        if style.label {
            let text = format!("{} {:.2}", det.label, det.score);
            let ty = if y0 > GLYPH_H {
                y0 - GLYPH_H - 1
            } else {
                y0 + style.thickness + 1
            };
            draw_text(&mut out, x0, ty, &text, style.color);
        }
    }
    out
}

fn denormalize(lo: f64, hi: f64, extent: u32) -> (u32, u32) {
    let max = extent - 1;
    let px = |v: f64| ((v * f64::from(extent) + 0.5).floor() as u32).min(max);
    (px(lo), px(hi))
}

const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;

/// 3x5 glyphs, five 3-bit rows, most significant row first.
fn glyph(c: char) -> Option<u16> {
    let g = match c.to_ascii_uppercase() {
        'A' => 0b010_101_111_101_101,
        'B' => 0b110_101_110_101_110,
        'C' => 0b011_100_100_100_011,
        'D' => 0b110_101_101_101_110,
        'E' => 0b111_100_110_100_111,
        'F' => 0b111_100_110_100_100,
        'G' => 0b011_100_101_101_011,
        'H' => 0b101_101_111_101_101,
        'I' => 0b111_010_010_010_111,
        'J' => 0b001_001_001_101_010,
        'K' => 0b101_101_110_101_101,
        'L' => 0b100_100_100_100_111,
        'M' => 0b101_111_111_101_101,
        'N' => 0b110_101_101_101_101,
        'O' => 0b010_101_101_101_010,
        'P' => 0b110_101_110_100_100,
        'Q' => 0b010_101_101_110_011,
        'R' => 0b110_101_110_101_101,
        'S' => 0b011_100_010_001_110,
        'T' => 0b111_010_010_010_010,
        'U' => 0b101_101_101_101_111,
        'V' => 0b101_101_101_101_010,
        'W' => 0b101_101_111_111_101,
        'X' => 0b101_101_010_101_101,
        'Y' => 0b101_101_010_010_010,
        'Z' => 0b111_001_010_100_111,
        '0' => 0b111_101_101_101_111,
        '1' => 0b010_110_010_010_111,
        '2' => 0b110_001_010_100_111,
        '3' => 0b110_001_010_001_110,
        '4' => 0b101_101_111_001_001,
        '5' => 0b111_100_110_001_110,
        '6' => 0b011_100_111_101_111,
        '7' => 0b111_001_010_010_010,
        '8' => 0b111_101_111_101_111,
        '9' => 0b111_101_111_001_110,
        '.' => 0b000_000_000_000_010,
        '-' => 0b000_000_111_000_000,
        _ => return None,
    };
    Some(g)
}

fn draw_text(img: &mut Image, x: u32, y: u32, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for c in text.chars() {
        if let Some(bits) = glyph(c) {
            for row in 0..GLYPH_H {
                for col in 0..GLYPH_W {
                    let bit = 14 - (row * GLYPH_W + col);
                    let (px, py) = (cx + col, y + row);
                    if bits >> bit & 1 == 1 && px < img.width && py < img.height {
                        img.set_pixel(px, py, color);
                    }
                }
            }
        }
        cx += GLYPH_W + 1;
        if cx >= img.width {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BoundingBox;

    fn gradient(w: u32, h: u32) -> Image {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&[(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn slice_widths_put_remainder_last() {
        let widths = |w, k| {
            slice_vertical(&gradient(w, 4), k)
                .unwrap()
                .iter()
                .map(Image::width)
                .collect::<Vec<_>>()
        };
        assert_eq!(widths(530, 5), vec![106; 5]);
        assert_eq!(widths(7, 3), vec![2, 2, 3]);
        assert_eq!(widths(9, 1), vec![9]);
    }

    #[test]
    fn single_slice_is_identity() {
        let img = gradient(11, 5);
        assert_eq!(slice_vertical(&img, 1).unwrap(), vec![img]);
    }

    #[test]
    fn bad_slice_counts() {
        let img = gradient(4, 4);
        assert!(matches!(
            slice_vertical(&img, 0),
            Err(ImagingError::BadSliceCount { .. })
        ));
        assert!(matches!(
            slice_vertical(&img, 5),
            Err(ImagingError::BadSliceCount { .. })
        ));
    }

    #[test]
    fn validate_dims_reports_actuals() {
        let img = Image::filled(531, 144, [0, 0, 0]);
        assert_eq!(
            validate_dims(&img, 530, 144),
            DimCheck::Fail {
                actual_width: 531,
                actual_height: 144
            }
        );
        assert!(validate_dims(&Image::filled(530, 144, [0, 0, 0]), 530, 144).passed());
    }

    #[test]
    fn compress_tiny_uniform_at_full_quality() {
        let png = Image::filled(3, 2, [10, 200, 30]).encode_png().unwrap();
        let jpg = compress_jpeg(&png, 100).unwrap();
        let back = Image::decode(&jpg).unwrap();
        assert_eq!((back.width(), back.height()), (3, 2));
        assert_eq!(&jpg[..2], &[0xFF, 0xD8]);
    }

    #[test]
    fn compress_rejects_garbage_and_bad_quality() {
        assert!(matches!(
            compress_jpeg(b"not an image", 30),
            Err(ImagingError::Decode(_))
        ));
        let png = Image::filled(2, 2, [0, 0, 0]).encode_png().unwrap();
        let mut truncated = png.clone();
        truncated.truncate(png.len() / 2);
        assert!(matches!(compress_jpeg(&truncated, 30), Err(ImagingError::Decode(_))));
        assert!(matches!(compress_jpeg(&png, 0), Err(ImagingError::BadQuality(0))));
        assert!(matches!(compress_jpeg(&png, 101), Err(ImagingError::BadQuality(101))));
    }

    #[test]
    fn render_without_detections_is_identity() {
        let img = gradient(20, 10);
        let out = render_boxes(&img, &[], &BoxStyle::default());
        assert_eq!(out.as_bytes(), img.as_bytes());
    }

    #[test]
    fn render_single_box_outline_per_pixel() {
        let img = Image::filled(100, 100, [0, 0, 0]);
        let det = Detection::bloom(BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap(), 0.9).unwrap();
        let style = BoxStyle {
            thickness: 1,
            color: [255, 0, 0],
            label: false,
        };
        let out = render_boxes(&img, &[det], &style);
        for y in 0..100 {
            for x in 0..100 {
                let on_vertical = (x == 25 || x == 75) && (25..=75).contains(&y);
                let on_horizontal = (y == 25 || y == 75) && (25..=75).contains(&x);
                let expected = if on_vertical || on_horizontal {
                    [255, 0, 0]
                } else {
                    [0, 0, 0]
                };
                assert_eq!(out.pixel(x, y), expected, "pixel ({x},{y})");
            }
        }
        // input untouched
        assert!(img.as_bytes().iter().all(|&b| b == 0));
    }

    #[test]
    fn render_full_frame_box_is_clipped() {
        let img = Image::filled(10, 6, [0, 0, 0]);
        let det = Detection::bloom(BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), 1.0).unwrap();
        let out = render_boxes(&img, &[det], &BoxStyle::default());
        assert_eq!(out.pixel(9, 5), [255, 0, 0]);
        assert_eq!(out.pixel(0, 0), [255, 0, 0]);
        assert_eq!(out.pixel(4, 3), [0, 0, 0]);
    }

    #[test]
    fn render_label_only_touches_text_area() {
        let img = Image::filled(60, 40, [0, 0, 0]);
        let det = Detection::bloom(BoundingBox::new(0.1, 0.5, 0.9, 0.9).unwrap(), 0.87).unwrap();
        let style = BoxStyle {
            label: true,
            ..BoxStyle::default()
        };
        let plain = render_boxes(&img, std::slice::from_ref(&det), &BoxStyle::default());
        let labelled = render_boxes(&img, &[det], &style);
        let mut changed = 0;
        for y in 0..40 {
            for x in 0..60 {
                if plain.pixel(x, y) != labelled.pixel(x, y) {
                    changed += 1;
                    assert!((14..19).contains(&y), "label pixel at row {y}");
                }
            }
        }
        assert!(changed > 0);
    }
}
