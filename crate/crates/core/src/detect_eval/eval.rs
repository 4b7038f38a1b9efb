use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::boxes::{iou, OrientedBox};
use crate::fscod::{sigmoid, DetectionGrid, LOG_SIZE_CLAMP, VALUES_PER_ANCHOR};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    pub bbox: OrientedBox<T>,
    pub confidence: T,
}

impl<T: Scalar> Detection<T> {
    pub fn translated(&self, dx: T, dy: T) -> Self {
        Self { bbox: self.bbox.translated(dx, dy), confidence: self.confidence }
    }
}

/// Descending confidence, then ascending `cx`, then ascending `cy`.
fn rank<T: Scalar>(a: &Detection<T>, b: &Detection<T>) -> Ordering {
    let key = |d: &Detection<T>| (d.confidence.as_f64(), d.bbox.cx.as_f64(), d.bbox.cy.as_f64());
    let (ka, kb) = (key(a), key(b));
    kb.0.total_cmp(&ka.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.total_cmp(&kb.2))
}

/// Every anchor slot whose confidence reaches `conf_threshold`, in
/// ego-frame meters.
pub fn decode<T: Scalar>(grid: &DetectionGrid<T>, conf_threshold: f64) -> Vec<Detection<T>> {
    let l = &grid.layout;
    let mut out = Vec::new();
    if grid.raw.c() != l.anchors.len() * VALUES_PER_ANCHOR {
        return out;
    }
    for (a, &(aw, al)) in l.anchors.iter().enumerate() {
        for row in 0..grid.rows() {
            for col in 0..grid.cols() {
                let v = |k| grid.value(a, k, row, col);
                let conf = sigmoid(v(6));
                if conf < conf_threshold {
                    continue;
                }
                let cx = (col as f64 + sigmoid(v(0))) * l.cell_m - l.extent_m;
                let cy = (row as f64 + sigmoid(v(1))) * l.cell_m - l.extent_m;
                let w = aw * v(2).clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp();
                let len = al * v(3).clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp();
                let yaw = v(4).atan2(v(5));
                out.push(Detection {
                    bbox: OrientedBox::new(T::lit(cx), T::lit(cy), T::lit(w), T::lit(len), T::lit(yaw)),
                    confidence: T::lit(conf),
                });
            }
        }
    }
    out
}

fn overlap<T: Scalar>(a: &OrientedBox<T>, b: &OrientedBox<T>) -> f64 {
    iou(a, b).map(|v| v.as_f64()).unwrap_or(0.0)
}

/// Greedy non-maximum suppression: keep the best remaining detection and
/// drop every other one overlapping it by more than `iou_threshold`.
pub fn nms<T: Scalar>(dets: &[Detection<T>], iou_threshold: f64) -> Vec<Detection<T>> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank);
    let mut keep: Vec<Detection<T>> = Vec::new();
    for d in sorted {
        if keep.iter().all(|k| overlap(&k.bbox, &d.bbox) <= iou_threshold) {
            keep.push(d);
        }
    }
    keep
}

/// True/false positive and miss counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    /// `tp / (tp + fp)`, 1.0 when nothing was detected.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    /// `tp / (tp + fn)`, 0.0 when there was nothing to find.
    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMatch {
    pub counts: Counts,
    /// For each ground-truth box, the index of the detection matched to it.
    pub gt_match: Vec<Option<usize>>,
}

/// Greedy one-to-one matching in descending confidence: each detection takes
/// the unmatched ground truth it overlaps most, if that overlap is at least
/// `iou_threshold`.
pub fn match_and_score<T: Scalar>(dets: &[Detection<T>], gts: &[OrientedBox<T>], iou_threshold: f64) -> FrameMatch {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| rank(&dets[a], &dets[b]));
    let mut gt_match = vec![None; gts.len()];
    let mut tp = 0;
    for di in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_match[gi].is_some() {
                continue;
            }
            let v = overlap(&dets[di].bbox, g);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            gt_match[gi] = Some(di);
            tp += 1;
        }
    }
    FrameMatch { counts: Counts { tp, fp: dets.len() - tp, fn_: gts.len() - tp }, gt_match }
}

/// Per target: how many of the two single-vehicle runs found it (0, 1 or 2).
pub fn categorize_targets<T: Scalar>(
    gts: &[OrientedBox<T>],
    ego_dets: &[Detection<T>],
    coop_dets: &[Detection<T>],
    iou_threshold: f64,
) -> Vec<u8> {
    let a = match_and_score(ego_dets, gts, iou_threshold);
    let b = match_and_score(coop_dets, gts, iou_threshold);
    a.gt_match.iter().zip(&b.gt_match).map(|(x, y)| x.is_some() as u8 + y.is_some() as u8).collect()
}

/// Detections and ground truth of one frame, both in the ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult<T> {
    pub dets: Vec<Detection<T>>,
    pub gts: Vec<OrientedBox<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall over all frames at each IoU threshold.
pub fn pr_vs_iou_sweep<T: Scalar>(frames: &[FrameResult<T>], thresholds: &[f64]) -> Vec<SweepPoint> {
    thresholds
        .iter()
        .map(|&t| {
            let mut c = Counts::default();
            for f in frames {
                c += match_and_score(&f.dets, &f.gts, t).counts;
            }
            SweepPoint { iou: t, precision: c.precision(), recall: c.recall() }
        })
        .collect()
}

/// Aggregate scores of one detector over a set of frames.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: Counts,
    /// Targets per consensus category.
    pub category_targets: [usize; 3],
    /// Of those, how many this detector found.
    pub category_hits: [usize; 3],
    /// Scene-flagged occluded targets, and how many were found.
    pub flagged_targets: usize,
    pub flagged_hits: usize,
}

impl EvalReport {
    pub fn precision(&self) -> f64 {
        self.counts.precision()
    }

    pub fn recall(&self) -> f64 {
        self.counts.recall()
    }

    pub fn category_recall(&self, k: usize) -> Option<f64> {
        (self.category_targets[k] > 0).then(|| self.category_hits[k] as f64 / self.category_targets[k] as f64)
    }

    pub fn flagged_recall(&self) -> Option<f64> {
        (self.flagged_targets > 0).then(|| self.flagged_hits as f64 / self.flagged_targets as f64)
    }

    /// Add one frame given this detector's matching, the target categories
    /// and the index of the flagged target, if any.
    pub fn add_frame(&mut self, m: &FrameMatch, categories: &[u8], flagged: Option<usize>) {
        self.counts += m.counts;
        for (gi, &c) in categories.iter().enumerate() {
            self.category_targets[c as usize] += 1;
            if m.gt_match[gi].is_some() {
                self.category_hits[c as usize] += 1;
            }
        }
        if let Some(f) = flagged {
            self.flagged_targets += 1;
            if m.gt_match[f].is_some() {
                self.flagged_hits += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fscod::HeadLayout;
    use crate::nn::Tensor;

    fn det(cx: f64, cy: f64, conf: f64) -> Detection<f64> {
        Detection { bbox: OrientedBox::new(cx, cy, 2.0, 4.0, 0.0), confidence: conf }
    }

    fn layout() -> HeadLayout {
        HeadLayout { anchors: vec![(2.0, 4.0)], cell_m: 2.5, extent_m: 5.0, lambda_coord: 5.0, lambda_noobj: 0.5 }
    }

    #[test]
    fn decode_one_hot_cell() {
        let mut raw = Tensor::filled([1, 7, 4, 4], 0.0f64);
        for cell in 0..16 {
            raw.data_mut()[6 * 16 + cell] = -50.0;
        }
        // cell (row 2, col 1): offsets 0.5, size exp(ln 1.5) and yaw pi/2
        let at = |k: usize| k * 16 + 2 * 4 + 1;
        raw.data_mut()[at(2)] = 1.5f64.ln();
        raw.data_mut()[at(4)] = 1.0;
        raw.data_mut()[at(5)] = 0.0;
        raw.data_mut()[at(6)] = 3.0;
        let grid = DetectionGrid { raw, layout: layout() };
        let d = decode(&grid, 0.4);
        assert_eq!(d.len(), 1);
        let b = d[0].bbox;
        assert!((b.cx - (1.5 * 2.5 - 5.0)).abs() < 1e-12);
        assert!((b.cy - (2.5 * 2.5 - 5.0)).abs() < 1e-12);
        assert!((b.w - 3.0).abs() < 1e-12 && (b.l - 4.0).abs() < 1e-12);
        assert!((b.yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!((d[0].confidence - sigmoid(3.0)).abs() < 1e-15);
        assert_eq!(decode(&grid, 0.0).len(), 16);
    }

    #[test]
    fn nms_keeps_best_of_duplicates() {
        let out = nms(&[det(0.0, 0.0, 0.8), det(0.0, 0.0, 0.9)], 0.5);
        assert_eq!(out, vec![det(0.0, 0.0, 0.9)]);
        assert_eq!(nms(&[det(1.0, 1.0, 0.3)], 0.5).len(), 1);
    }

    #[test]
    fn perfect_and_empty_matching() {
        let gts: Vec<_> = [det(0.0, 0.0, 1.0), det(10.0, 0.0, 1.0)].iter().map(|d| d.bbox).collect();
        let m = match_and_score(&[det(0.0, 0.0, 1.0), det(10.0, 0.0, 1.0)], &gts, 0.5);
        assert_eq!((m.counts.precision(), m.counts.recall()), (1.0, 1.0));
        let m = match_and_score::<f64>(&[], &gts, 0.5);
        assert_eq!((m.counts.precision(), m.counts.recall()), (1.0, 0.0));
    }

    #[test]
    fn one_detection_matches_one_target() {
        let gts = vec![det(0.0, 0.0, 1.0).bbox, det(0.0, 0.0, 1.0).bbox];
        let m = match_and_score(&[det(0.0, 0.0, 0.9)], &gts, 0.5);
        assert_eq!(m.counts, Counts { tp: 1, fp: 0, fn_: 1 });
    }

    #[test]
    fn categories() {
        let gts = vec![det(0.0, 0.0, 1.0).bbox, det(10.0, 0.0, 1.0).bbox, det(20.0, 0.0, 1.0).bbox];
        let ego = [det(0.0, 0.0, 0.9), det(10.0, 0.0, 0.9)];
        let coop = [det(0.0, 0.1, 0.9)];
        assert_eq!(categorize_targets(&gts, &ego, &coop, 0.5), vec![2, 1, 0]);
    }
}
