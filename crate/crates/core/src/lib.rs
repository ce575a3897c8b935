//! Single-stage, scale-invariant face detection toolkit.

pub mod anchors;
pub mod boxcodec;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod infer;
pub mod loss;
pub mod matching;
pub mod sampler;
pub mod sshgraph;
pub mod tensornet;
pub mod toy;
pub mod trainer;

pub use anchors::{AnchorConfig, AnchorSet, ModuleId};
pub use boxcodec::Delta;
pub use error::{Error, Result};
pub use geometry::{iou, iou_matrix, BBox};
pub use matching::{Label, MatchResult};
