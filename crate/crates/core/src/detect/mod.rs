//! Anchor-based box detection over the feature pyramid.

pub mod anchors;
pub mod boxes;
pub mod head;
pub mod loss;
pub mod targets;

pub use anchors::{generate_anchors, AnchorConfig, Anchors};
pub use boxes::{decode_deltas, encode_deltas, BBox};
pub use head::{detection_loss, DetectionHead, HeadConfig, HeadVars, LossBreakdown};
pub use loss::{box_loss, focal_loss, FocalParams};
pub use targets::{match_anchors, BoxTargets, GtBox};
