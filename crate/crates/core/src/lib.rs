//! Algorithms for a fisheye vehicle-detection pipeline that live outside the
//! detector backbone: box geometry and the IoU loss family, head decoding,
//! NMS and selective ensemble fusion, the evaluation metric suite, the
//! day-night separator network and dataset manifest handling.
//!
//! Everything here is pure and single-image unless noted; callers are free to
//! fan work out across images.

pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod head_decode;
pub mod postprocess;
pub mod separator;
pub mod text;

pub use datasets::{Annotation, ImageRecord, Manifest, PartitionRule, Source, TimeOfDay};
pub use error::{Error, Result};
pub use evaluation::{EvalConfig, EvalReport, GroundTruth, GroundTruthSet};
pub use geometry::{BoxCenter, BoxCorner, CiouTerms};
pub use head_decode::{Anchor, AnchorSet, Detection, ImageTensor, RawGridPrediction};
pub use postprocess::DetectionSet;
pub use separator::{Route, SeparatorParams, TrainConfig};
