//! Small-object detection for thermal imagery.
//!
//! The model follows a YOLO-style layout: a ghost-convolution backbone
//! finished by an ASPP-fed transformer encoder, a Bi-FPN neck whose four
//! outputs (strides 4, 8, 16, 32) are refined by window attention, and four
//! sigmoid prediction heads. Detections are post-processed with Soft-NMS
//! (greedy NMS and weighted box fusion are provided for comparison) and scored
//! with all-point interpolated average precision.
//!
//! Everything is plain `f32` CPU code with no autograd; correctness rests on
//! the independent oracles and gradient checks in the test suites.

pub mod attention;
pub mod bench;
pub mod blocks;
pub mod data;
pub mod detection;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod head;
pub mod init;
pub mod model;
pub mod neck;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Tensor};
