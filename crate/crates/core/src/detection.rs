//! Normalized boxes, scored detections and the detection JSON schema.
//!
//! Coordinates are fractions of the image width/height, with the origin at the
//! top-left corner. The wire form uses `topX`/`topY`/`bottomX`/`bottomY`:
//!
//! ```json
//! {"filename": "f001.jpg",
//!  "boxes": [{"box": {"topX": 0.1, "topY": 0.2, "bottomX": 0.3, "bottomY": 0.4},
//!             "label": "bloom", "score": 0.93}]}
//! ```

use serde::{Deserialize, Serialize};

/// Default class label for the single-class bloom detector.
pub const BLOOM_LABEL: &str = "bloom";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InvalidBox {
    #[error("box coordinate is not finite")]
    NotFinite,
    #[error("box x-range [{0}, {1}] must satisfy 0 <= top < bottom <= 1")]
    XRange(f64, f64),
    #[error("box y-range [{0}, {1}] must satisfy 0 <= top < bottom <= 1")]
    YRange(f64, f64),
    #[error("score {0} outside [0, 1]")]
    Score(f64),
}

/// Axis-aligned box in normalized image coordinates.
///
/// Always satisfies `0 <= top_x < bottom_x <= 1` and `0 <= top_y < bottom_y <= 1`;
/// construction and deserialization both enforce it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoundingBox {
    top_x: f64,
    top_y: f64,
    bottom_x: f64,
    bottom_y: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawBox {
    top_x: f64,
    top_y: f64,
    bottom_x: f64,
    bottom_y: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = InvalidBox;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        BoundingBox::new(raw.top_x, raw.top_y, raw.bottom_x, raw.bottom_y)
    }
}

impl From<BoundingBox> for RawBox {
    fn from(b: BoundingBox) -> Self {
        RawBox {
            top_x: b.top_x,
            top_y: b.top_y,
            bottom_x: b.bottom_x,
            bottom_y: b.bottom_y,
        }
    }
}

impl BoundingBox {
    pub fn new(top_x: f64, top_y: f64, bottom_x: f64, bottom_y: f64) -> Result<Self, InvalidBox> {
        if ![top_x, top_y, bottom_x, bottom_y].iter().all(|v| v.is_finite()) {
            return Err(InvalidBox::NotFinite);
        }
        if !(0.0 <= top_x && top_x < bottom_x && bottom_x <= 1.0) {
            return Err(InvalidBox::XRange(top_x, bottom_x));
        }
        if !(0.0 <= top_y && top_y < bottom_y && bottom_y <= 1.0) {
            return Err(InvalidBox::YRange(top_y, bottom_y));
        }
        Ok(Self {
            top_x,
            top_y,
            bottom_x,
            bottom_y,
        })
    }

    /// Box covering the pixel rectangle `[x0, x1) x [y0, y1)` of a `width x height` image.
    pub fn from_pixels(x0: u32, y0: u32, x1: u32, y1: u32, width: u32, height: u32) -> Result<Self, InvalidBox> {
        let (w, h) = (f64::from(width), f64::from(height));
        Self::new(
            f64::from(x0) / w,
            f64::from(y0) / h,
            f64::from(x1) / w,
            f64::from(y1) / h,
        )
    }

    pub fn top_x(&self) -> f64 {
        self.top_x
    }

    pub fn top_y(&self) -> f64 {
        self.top_y
    }

    pub fn bottom_x(&self) -> f64 {
        self.bottom_x
    }

    pub fn bottom_y(&self) -> f64 {
        self.bottom_y
    }

    pub fn width(&self) -> f64 {
        self.bottom_x - self.top_x
    }

    pub fn height(&self) -> f64 {
        self.bottom_y - self.top_y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// A scored prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection")]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: String,
    pub score: f64,
}

#[derive(Deserialize)]
struct RawDetection {
    #[serde(rename = "box")]
    bbox: BoundingBox,
    #[serde(default = "default_label")]
    label: String,
    score: f64,
}

fn default_label() -> String {
    BLOOM_LABEL.to_string()
}

impl TryFrom<RawDetection> for Detection {
    type Error = InvalidBox;

    fn try_from(raw: RawDetection) -> Result<Self, Self::Error> {
        Detection::new(raw.bbox, raw.label, raw.score)
    }
}

impl Detection {
    pub fn new(bbox: BoundingBox, label: impl Into<String>, score: f64) -> Result<Self, InvalidBox> {
        if !(0.0..=1.0).contains(&score) {
            return Err(InvalidBox::Score(score));
        }
        Ok(Self {
            bbox,
            label: label.into(),
            score,
        })
    }

    pub fn bloom(bbox: BoundingBox, score: f64) -> Result<Self, InvalidBox> {
        Self::new(bbox, BLOOM_LABEL, score)
    }
}

/// Response body of the scoring endpoint, also used as the per-image
/// prediction file format for corpus evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResponse {
    pub filename: String,
    pub boxes: Vec<Detection>,
}

impl DetectionResponse {
    /// Canonical JSON encoding. Field order and float formatting are stable,
    /// so equal responses always encode to identical bytes.
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("detection response always serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inverted_and_out_of_range_boxes() {
        assert!(BoundingBox::new(0.5, 0.1, 0.5, 0.2).is_err());
        assert!(BoundingBox::new(0.1, 0.3, 0.2, 0.2).is_err());
        assert!(BoundingBox::new(-0.1, 0.0, 0.2, 0.2).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0001, 0.2).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 0.2).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn wire_schema_is_exact() {
        let det = Detection::bloom(BoundingBox::new(0.25, 0.5, 0.75, 1.0).unwrap(), 0.5).unwrap();
        let resp = DetectionResponse {
            filename: "a.jpg".into(),
            boxes: vec![det],
        };
        assert_eq!(
            String::from_utf8(resp.to_json()).unwrap(),
            r#"{"filename":"a.jpg","boxes":[{"box":{"topX":0.25,"topY":0.5,"bottomX":0.75,"bottomY":1.0},"label":"bloom","score":0.5}]}"#
        );
        let back: DetectionResponse = serde_json::from_slice(&resp.to_json()).unwrap();
        assert_eq!(back, resp);
    }

    #[test]
    fn deserialization_enforces_invariants() {
        let bad_score = r#"{"box":{"topX":0,"topY":0,"bottomX":1,"bottomY":1},"label":"bloom","score":1.2}"#;
        assert!(serde_json::from_str::<Detection>(bad_score).is_err());
        let bad_box = r#"{"box":{"topX":0.6,"topY":0,"bottomX":0.5,"bottomY":1},"label":"bloom","score":0.2}"#;
        assert!(serde_json::from_str::<Detection>(bad_box).is_err());
    }
}
