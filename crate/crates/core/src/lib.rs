//! Shared building blocks for the bloom detection pipeline.
//!
//! * [`detection`] holds the normalized bounding box and detection types and the
//!   detection JSON schema shared by the detector service, the renderer and the
//!   evaluator.
//! * [`imaging`] implements recompression, slicing, dimension checks and box
//!   rendering on plain RGB buffers.
//! * [`evaluation`] computes IoU, greedy matching, precision/recall/F1 and
//!   all-point interpolated average precision.

pub mod detection;
pub mod evaluation;
pub mod imaging;

pub use detection::{BoundingBox, Detection, DetectionResponse, InvalidBox};
pub use imaging::Image;
