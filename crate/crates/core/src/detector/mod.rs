//! Single-scale grid-anchor vessel detector.

pub mod assign;
pub mod geometry;
pub mod loss;
pub mod net;

pub use assign::{assign_targets, best_anchor, fit_anchors, GridSpec, Positive, TargetAssignment};
pub use geometry::{box_loss, box_loss_grad, enclosing_area, intersection_area, iou, BoundingBox};
pub use loss::{box_loss_sum, clc_loss, conf_loss, decode, total_loss, total_loss_grad, LossBreakdown, SlotPrediction};
pub use net::{DetectorArch, DetectorNet};
pub mod model;

pub use model::{
    detection_csv, nms, train_detector, AnnotatedFrame, DetectParams, Detection, DetectorLossRecord, DetectorModel,
    DetectorTrainConfig, DETECTION_CSV_HEADER,
};
