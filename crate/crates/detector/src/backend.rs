use std::collections::HashMap;
use std::path::Path;

use bloompipe_core::{BoundingBox, Detection, Image};

/// A detector that maps an image to scored boxes.
///
/// Implementations must be deterministic and safe to call from many threads
/// at once.
pub trait DetectorBackend: Send + Sync {
    fn name(&self) -> &str;

    /// `filename_hint` is the client-supplied file name, possibly empty.
    fn detect(&self, image: &Image, filename_hint: &str) -> Vec<Detection>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThresholdParams {
    /// Pixels with `min(R, G, B) >= brightness_threshold` are foreground.
    pub brightness_threshold: u8,
    pub min_area_px: u32,
    pub max_boxes: usize,
    pub connectivity: Connectivity,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self {
            brightness_threshold: 200,
            min_area_px: 20,
            max_boxes: 50,
            connectivity: Connectivity::Four,
        }
    }
}

/// White-blob detector: thresholds on the darkest channel and reports each
/// large enough connected component.
#[derive(Debug, Clone, Default)]
pub struct ThresholdBackend {
    pub params: ThresholdParams,
}

/// One connected foreground region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// Pixel bounds, exclusive at the bottom-right.
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub area: u32,
    /// Sum of `min(R, G, B)` over the component.
    pub brightness_sum: u64,
    /// Row-major indices of member pixels, sorted.
    pub pixels: Vec<u32>,
}

/// Labels the foreground components of `image`, in raster order of each
/// component's first pixel.
pub fn components(image: &Image, threshold: u8, connectivity: Connectivity) -> Vec<Component> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let lum: Vec<u8> = image
        .as_bytes()
        .chunks_exact(3)
        .map(|p| p[0].min(p[1]).min(p[2]))
        .collect();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || lum[start] < threshold {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut c = Component {
            x0: u32::MAX,
            y0: u32::MAX,
            x1: 0,
            y1: 0,
            area: 0,
            brightness_sum: 0,
            pixels: Vec::new(),
        };
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            c.x0 = c.x0.min(x as u32);
            c.y0 = c.y0.min(y as u32);
            c.x1 = c.x1.max(x as u32 + 1);
            c.y1 = c.y1.max(y as u32 + 1);
            c.area += 1;
            c.brightness_sum += u64::from(lum[i]);
            c.pixels.push(i as u32);
            for (dx, dy) in neighbours(connectivity) {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !seen[j] && lum[j] >= threshold {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        c.pixels.sort_unstable();
        out.push(c);
    }
    out
}

fn neighbours(c: Connectivity) -> &'static [(isize, isize)] {
    const FOUR: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
    const EIGHT: [(isize, isize); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
    match c {
        Connectivity::Four => &FOUR,
        Connectivity::Eight => &EIGHT,
    }
}

impl ThresholdBackend {
    pub fn new(params: ThresholdParams) -> Self {
        Self { params }
    }
}

impl DetectorBackend for ThresholdBackend {
    fn name(&self) -> &str {
        "threshold"
    }

    fn detect(&self, image: &Image, _filename_hint: &str) -> Vec<Detection> {
        let p = &self.params;
        let mut found: Vec<Detection> = components(image, p.brightness_threshold, p.connectivity)
            .into_iter()
            .filter(|c| c.area >= p.min_area_px.max(1))
            .map(|c| {
                let bbox = BoundingBox::from_pixels(c.x0, c.y0, c.x1, c.y1, image.width(), image.height())
                    .expect("component lies inside the image");
                let score = c.brightness_sum as f64 / (f64::from(c.area) * 255.0);
                Detection::bloom(bbox, score.clamp(0.0, 1.0)).expect("score in range")
            })
            .collect();
        // stable: equal scores keep raster order
        found.sort_by(|a, b| b.score.total_cmp(&a.score));
        found.truncate(p.max_boxes);
        found
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("cannot read fixture table {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid fixture table: {0}")]
    Invalid(#[from] serde_json::Error),
}

/// Replays scripted detections keyed by file name.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    table: HashMap<String, Vec<Detection>>,
}

impl MockBackend {
    pub fn new(table: HashMap<String, Vec<Detection>>) -> Self {
        Self { table }
    }

    /// Parses a `{"file.jpg": [detection, ..]}` table. Every box and score is
    /// validated.
    pub fn from_json(bytes: &[u8]) -> Result<Self, FixtureError> {
        Ok(Self::new(serde_json::from_slice(bytes)?))
    }

    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let bytes = std::fs::read(path).map_err(|source| FixtureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&bytes)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl DetectorBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    /// Looks up the exact hint first, then its last path segment.
    fn detect(&self, _image: &Image, filename_hint: &str) -> Vec<Detection> {
        let base = filename_hint.rsplit('/').next().unwrap_or(filename_hint);
        self.table
            .get(filename_hint)
            .or_else(|| self.table.get(base))
            .cloned()
            .unwrap_or_default()
    }
}
