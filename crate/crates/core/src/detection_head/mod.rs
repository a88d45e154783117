//! Hybrid detection head: anchor-based subnets plus an anchor-free branch
//! trained with online feature-level selection.

pub mod anchors;
pub mod boxes;
pub mod head;
pub mod losses;
pub mod postprocess;
pub mod targets;

pub use anchors::{
    assign_anchors, decode_box, encode_box, generate_anchors, Anchor, AnchorLabel, AnchorSet,
    ANCHORS_PER_CELL,
};
pub use boxes::{iou, nms, Rect};
pub use head::{DetectionHead, HeadConfig, HeadOutputs, LevelOutputs, LevelVars, NUM_CLASSES};
pub use losses::{
    focal_logit, focal_loss, focal_term, focal_term_grad, iou_loss, iou_loss_grad, FocalParams,
};
pub use postprocess::{apply_nms, postprocess, PostprocessConfig};
pub use targets::{
    decode_distances, detection_loss, effective_region, instance_level_loss, select_feature_level,
    LevelGeom, LevelPrediction, LossBreakdown, LossConfig,
};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    AnchorBased,
    AnchorFree,
}

/// A scored box in image pixels; `cls_score` is set by the second stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Rect,
    pub score: f64,
    pub cls_score: Option<f64>,
    pub source: Branch,
}

impl Detection {
    pub fn new(bbox: Rect, score: f64, source: Branch) -> Self {
        Self {
            bbox,
            score,
            cls_score: None,
            source,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        self.bbox.center()
    }
}
