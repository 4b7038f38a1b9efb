//! Oriented boxes, decoding of head outputs, suppression, matching and the
//! precision / recall bookkeeping.

mod boxes;
mod eval;

pub use boxes::{clip_polygon, intersection_area, iou, polygon_area, OrientedBox};
pub use eval::{
    categorize_targets, decode, match_and_score, nms, pr_vs_iou_sweep, Counts, Detection, EvalReport, FrameMatch,
    FrameResult, SweepPoint,
};
