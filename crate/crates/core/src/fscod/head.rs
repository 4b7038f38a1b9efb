//! Anchor-based detection head: raw output layout, target assignment and the
//! squared-error detection loss with its gradient.
//!
//! Per anchor `a` and cell `(row, col)` the head emits
//! `tx, ty, tw, tl, s, c, tc` at channels `7a .. 7a + 7`. Decoded:
//! `x = (col + sigmoid(tx)) * cell - extent`, `w = a_w * exp(tw)`,
//! `yaw = atan2(s, c)`, `conf = sigmoid(tc)`.

use std::f64::consts::{FRAC_PI_4, PI};

use crate::detect_eval::OrientedBox;
use crate::error::PipelineError;
use crate::geometry::normalize_angle;
use crate::nn::Tensor;
use crate::scalar::Scalar;

use super::config::{PipelineConfig, VALUES_PER_ANCHOR};

/// Log-size outputs are clamped to this magnitude before `exp`.
pub const LOG_SIZE_CLAMP: f64 = 8.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Boxes are symmetric under a half turn, so regress a yaw in `[-pi/4, 3pi/4)`.
pub fn canonical_yaw(yaw: f64) -> f64 {
    let y = normalize_angle(yaw);
    if y < -FRAC_PI_4 {
        y + PI
    } else if y >= 3.0 * FRAC_PI_4 {
        y - PI
    } else {
        y
    }
}

/// Geometry of the head output, shared by decoding and the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayout {
    pub anchors: Vec<(f64, f64)>,
    pub cell_m: f64,
    pub extent_m: f64,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
}

impl HeadLayout {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            anchors: cfg.anchors.clone(),
            cell_m: cfg.cell_m(),
            extent_m: cfg.grid.extent_m,
            lambda_coord: cfg.lambda_coord,
            lambda_noobj: cfg.lambda_noobj,
        }
    }

    pub fn channels(&self) -> usize {
        self.anchors.len() * VALUES_PER_ANCHOR
    }
}

/// Raw head output for one frame, `(1, A * 7, H_f, W_f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGrid<T> {
    pub raw: Tensor<T>,
    pub layout: HeadLayout,
}

impl<T: Scalar> DetectionGrid<T> {
    pub fn rows(&self) -> usize {
        self.raw.h()
    }

    pub fn cols(&self) -> usize {
        self.raw.w()
    }

    /// Raw value `k` (0..7) of anchor `a` at a cell.
    pub fn value(&self, a: usize, k: usize, row: usize, col: usize) -> f64 {
        let (h, w) = (self.rows(), self.cols());
        self.raw.data()[((a * VALUES_PER_ANCHOR + k) * h + row) * w + col].as_f64()
    }
}

/// One ground-truth box bound to an output slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub item: usize,
    pub anchor: usize,
    pub row: usize,
    pub col: usize,
    /// `x, y` offsets in the cell, `sqrt(w), sqrt(l)`, `sin, cos` of the canonical yaw.
    pub target: [f64; 6],
}

/// Footprint IoU of two centred axis-aligned `(w, l)` rectangles.
pub fn size_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

/// Bind each box to the cell holding its centre and the best-fitting free
/// anchor there. Boxes that find every anchor of their cell taken are dropped.
pub fn assign_targets(
    layout: &HeadLayout,
    rows: usize,
    cols: usize,
    item: usize,
    gts: &[OrientedBox<f64>],
) -> Result<Vec<Assignment>, PipelineError> {
    let mut out: Vec<Assignment> = Vec::with_capacity(gts.len());
    for g in gts {
        if g.is_degenerate() || !g.cx.is_finite() || !g.cy.is_finite() || !g.yaw.is_finite() {
            return Err(PipelineError::InvalidTarget(format!("degenerate or non-finite box {g:?}")));
        }
        let fx = (g.cx + layout.extent_m) / layout.cell_m;
        let fy = (g.cy + layout.extent_m) / layout.cell_m;
        let (col, row) = (fx.floor(), fy.floor());
        if col < 0.0 || row < 0.0 || col >= cols as f64 || row >= rows as f64 {
            return Err(PipelineError::InvalidTarget(format!("box centre ({}, {}) outside the grid", g.cx, g.cy)));
        }
        let (col, row) = (col as usize, row as usize);
        let mut order: Vec<usize> = (0..layout.anchors.len()).collect();
        order.sort_by(|&a, &b| {
            size_iou(layout.anchors[b], (g.w, g.l)).total_cmp(&size_iou(layout.anchors[a], (g.w, g.l)))
        });
        let free = order
            .into_iter()
            .find(|&a| !out.iter().any(|s| s.anchor == a && s.row == row && s.col == col));
        let Some(anchor) = free else { continue };
        let yaw = canonical_yaw(g.yaw);
        out.push(Assignment {
            item,
            anchor,
            row,
            col,
            target: [fx - col as f64, fy - row as f64, g.w.sqrt(), g.l.sqrt(), yaw.sin(), yaw.cos()],
        });
    }
    Ok(out)
}

/// Mean detection loss over the batch and its gradient with respect to the
/// raw head output.
///
/// Responsible slots pay `lambda_coord` times the squared error on
/// `x, y, sqrt(w), sqrt(l), sin, cos` plus `(conf - 1)^2`; every other slot
/// pays `lambda_noobj * conf^2`.
pub fn detection_loss<T: Scalar>(
    raw: &Tensor<T>,
    targets: &[Vec<OrientedBox<f64>>],
    layout: &HeadLayout,
) -> Result<(f64, Tensor<T>), PipelineError> {
    let [n, c, h, w] = raw.shape();
    if c != layout.channels() {
        return Err(PipelineError::Config(format!("head has {c} channels, layout expects {}", layout.channels())));
    }
    if targets.len() != n {
        return Err(PipelineError::InvalidTarget(format!("{} target lists for a batch of {n}", targets.len())));
    }
    let hw = h * w;
    let idx = |item: usize, a: usize, k: usize, cell: usize| ((item * c) + a * VALUES_PER_ANCHOR + k) * hw + cell;
    let data = raw.data();
    let mut grad = vec![0.0f64; data.len()];
    let mut total = 0.0;
    let mut responsible = vec![false; n * layout.anchors.len() * hw];

    for (item, gts) in targets.iter().enumerate() {
        let mut item_loss = 0.0;
        for s in assign_targets(layout, h, w, item, gts)? {
            let cell = s.row * w + s.col;
            responsible[(item * layout.anchors.len() + s.anchor) * hw + cell] = true;
            let v = |k: usize| data[idx(item, s.anchor, k, cell)].as_f64();
            let (aw, al) = layout.anchors[s.anchor];
            let px = sigmoid(v(0));
            let py = sigmoid(v(1));
            let tw = v(2).clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP);
            let tl = v(3).clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP);
            let sw = aw.sqrt() * (0.5 * tw).exp();
            let sl = al.sqrt() * (0.5 * tl).exp();
            let pred = [px, py, sw, sl, v(4), v(5)];
            // d pred / d raw for each regressed quantity
            let dpred = [
                px * (1.0 - px),
                py * (1.0 - py),
                if v(2).abs() < LOG_SIZE_CLAMP { 0.5 * sw } else { 0.0 },
                if v(3).abs() < LOG_SIZE_CLAMP { 0.5 * sl } else { 0.0 },
                1.0,
                1.0,
            ];
            for k in 0..6 {
                let e = pred[k] - s.target[k];
                item_loss += layout.lambda_coord * e * e;
                grad[idx(item, s.anchor, k, cell)] = 2.0 * layout.lambda_coord * e * dpred[k];
            }
            let conf = sigmoid(v(6));
            item_loss += (conf - 1.0) * (conf - 1.0);
            grad[idx(item, s.anchor, 6, cell)] = 2.0 * (conf - 1.0) * conf * (1.0 - conf);
        }
        for a in 0..layout.anchors.len() {
            for cell in 0..hw {
                if responsible[(item * layout.anchors.len() + a) * hw + cell] {
                    continue;
                }
                let i = idx(item, a, 6, cell);
                let conf = sigmoid(data[i].as_f64());
                item_loss += layout.lambda_noobj * conf * conf;
                grad[i] = 2.0 * layout.lambda_noobj * conf * conf * (1.0 - conf);
            }
        }
        if !item_loss.is_finite() {
            return Err(PipelineError::NonFiniteLoss { sample: item });
        }
        total += item_loss;
    }
    let inv = 1.0 / n.max(1) as f64;
    let grad = Tensor::from_vec(raw.shape(), grad.into_iter().map(|g| T::lit(g * inv)).collect())?;
    Ok((total * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> HeadLayout {
        HeadLayout { anchors: vec![(1.8, 4.5), (2.0, 3.8)], cell_m: 2.5, extent_m: 10.0, lambda_coord: 5.0, lambda_noobj: 0.5 }
    }

    #[test]
    fn canonical_yaw_range_and_symmetry() {
        for k in -40..40 {
            let y = k as f64 * 0.173;
            let c = canonical_yaw(y);
            assert!((-FRAC_PI_4..3.0 * FRAC_PI_4).contains(&c));
            // Same line as the input.
            assert!((c - y).sin().abs() < 1e-9);
        }
    }

    #[test]
    fn assignment_uses_centre_cell_and_best_anchor() {
        let g = OrientedBox::new(-8.9, 3.1, 2.0, 3.8, 0.0);
        let s = assign_targets(&layout(), 8, 8, 0, &[g]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].row, s[0].col, s[0].anchor), (5, 0, 1));
        assert!((s[0].target[0] - 0.44).abs() < 1e-12);
        assert!((s[0].target[1] - 0.24).abs() < 1e-12);
    }

    #[test]
    fn crowded_cell_falls_back_then_drops() {
        let g = OrientedBox::new(1.0, 1.0, 1.8, 4.5, 0.0);
        let s = assign_targets(&layout(), 8, 8, 0, &[g, g, g]).unwrap();
        assert_eq!(s.iter().map(|a| a.anchor).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn outside_target_is_an_error() {
        let g = OrientedBox::new(10.5, 0.0, 1.8, 4.5, 0.0);
        assert!(matches!(assign_targets(&layout(), 8, 8, 0, &[g]), Err(PipelineError::InvalidTarget(_))));
    }

    #[test]
    fn empty_scene_loss_is_noobj_only() {
        let raw = Tensor::<f64>::zeros([1, 14, 8, 8]);
        let (loss, grad) = detection_loss(&raw, &[vec![]], &layout()).unwrap();
        assert!((loss - 0.5 * 0.25 * 128.0).abs() < 1e-12);
        assert!(grad.data().iter().enumerate().all(|(i, &g)| (i / 64) % 7 == 6 || g == 0.0));
    }
}
