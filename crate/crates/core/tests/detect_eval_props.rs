use fscod::detect_eval::{
    categorize_targets, decode, iou, match_and_score, nms, pr_vs_iou_sweep, Detection, EvalReport, FrameResult, OrientedBox,
};
use fscod::fscod::{DetectionGrid, HeadLayout};
use fscod::nn::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Area fraction of a fine raster covering both boxes.
fn raster_iou(a: &OrientedBox<f64>, b: &OrientedBox<f64>, n: usize) -> f64 {
    let inside = |bx: &OrientedBox<f64>, x: f64, y: f64| {
        let (s, c) = bx.yaw.sin_cos();
        let (dx, dy) = (x - bx.cx, y - bx.cy);
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= bx.l / 2.0 && across.abs() <= bx.w / 2.0
    };
    let r = |bx: &OrientedBox<f64>| (bx.w * bx.w + bx.l * bx.l).sqrt() / 2.0;
    let x0 = (a.cx - r(a)).min(b.cx - r(b));
    let x1 = (a.cx + r(a)).max(b.cx + r(b));
    let y0 = (a.cy - r(a)).min(b.cy - r(b));
    let y1 = (a.cy + r(a)).max(b.cy + r(b));
    let (hx, hy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..n {
        let y = y0 + (i as f64 + 0.5) * hy;
        for j in 0..n {
            let x = x0 + (j as f64 + 0.5) * hx;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn random_box(rng: &mut ChaCha8Rng, span: f64) -> OrientedBox<f64> {
    OrientedBox::new(
        rng.random_range(-span..span),
        rng.random_range(-span..span),
        rng.random_range(0.5..3.0),
        rng.random_range(1.0..6.0),
        rng.random_range(-3.2..3.2),
    )
}

#[test]
fn iou_matches_rasterization() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let a = random_box(&mut rng, 2.0);
        let b = random_box(&mut rng, 2.0);
        let want = raster_iou(&a, &b, 1000);
        let got = iou(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-2, "{a:?} {b:?}: polygon {got} raster {want}");
    }
}

#[test]
fn iou_corner_cases_exact() {
    let a = OrientedBox::new(0.0, 0.0, 2.0, 2.0, 0.0);
    assert_eq!(iou(&a, &a).unwrap(), 1.0);
    assert_eq!(iou(&a, &OrientedBox::new(10.0, 0.0, 2.0, 2.0, 0.0)).unwrap(), 0.0);
    assert_eq!(iou(&a, &OrientedBox::new(3.0, 0.0, 2.0, 2.0, 0.7)).unwrap(), 0.0);
    let b = OrientedBox::new(1.0, 0.0, 2.0, 2.0, 0.0);
    assert!((iou(&a, &b).unwrap() - 1.0f64 / 3.0).abs() < 1e-12);
    assert!(iou(&a, &OrientedBox::new(0.0, 0.0, 0.0, 2.0, 0.0)).is_err());
}

fn dets(rng: &mut ChaCha8Rng, n: usize, span: f64) -> Vec<Detection<f64>> {
    (0..n).map(|_| Detection { bbox: random_box(rng, span), confidence: rng.random_range(0.0..1.0) }).collect()
}

/// Suppression-flag formulation of greedy NMS.
fn nms_oracle(d: &[Detection<f64>], t: f64) -> Vec<Detection<f64>> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| {
        d[b].confidence
            .partial_cmp(&d[a].confidence)
            .unwrap()
            .then(d[a].bbox.cx.partial_cmp(&d[b].bbox.cx).unwrap())
            .then(d[a].bbox.cy.partial_cmp(&d[b].bbox.cy).unwrap())
    });
    let mut suppressed = vec![false; d.len()];
    let mut out = Vec::new();
    for i in 0..idx.len() {
        if suppressed[i] {
            continue;
        }
        out.push(d[idx[i]]);
        for j in i + 1..idx.len() {
            if iou(&d[idx[i]].bbox, &d[idx[j]].bbox).unwrap() > t {
                suppressed[j] = true;
            }
        }
    }
    out
}

#[test]
fn nms_matches_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..300 {
        let d = dets(&mut rng, 1 + i % 40, 4.0);
        for t in [0.1, 0.3, 0.5, 0.7] {
            let got = nms(&d, t);
            assert_eq!(got, nms_oracle(&d, t));
            assert_eq!(nms(&got, t), got, "idempotent");
            for (a, x) in got.iter().enumerate() {
                for y in &got[a + 1..] {
                    assert!(iou(&x.bbox, &y.bbox).unwrap() <= t);
                }
            }
        }
    }
}

/// Straightforward greedy matcher over a precomputed IoU matrix.
fn match_oracle(d: &[Detection<f64>], g: &[OrientedBox<f64>], t: f64) -> usize {
    let m: Vec<Vec<f64>> = d.iter().map(|x| g.iter().map(|y| iou(&x.bbox, y).unwrap()).collect()).collect();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| {
        d[b].confidence
            .partial_cmp(&d[a].confidence)
            .unwrap()
            .then(d[a].bbox.cx.partial_cmp(&d[b].bbox.cx).unwrap())
            .then(d[a].bbox.cy.partial_cmp(&d[b].bbox.cy).unwrap())
    });
    let mut taken = vec![false; g.len()];
    let mut tp = 0;
    for i in order {
        let mut best = None;
        let mut best_v = t;
        for j in 0..g.len() {
            if !taken[j] && m[i][j] >= best_v && best.is_none_or(|_| m[i][j] > best_v) {
                best = Some(j);
                best_v = m[i][j];
            }
        }
        if let Some(j) = best {
            taken[j] = true;
            tp += 1;
        }
    }
    tp
}

#[test]
fn matcher_matches_oracle_and_counts_are_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..500 {
        let d = dets(&mut rng, i % 15, 3.0);
        let g: Vec<_> = (0..(i / 7) % 10).map(|_| random_box(&mut rng, 3.0)).collect();
        for t in [0.1, 0.5, 0.8] {
            let m = match_and_score(&d, &g, t);
            assert_eq!(m.counts.tp, match_oracle(&d, &g, t));
            assert!(m.counts.tp <= d.len().min(g.len()));
            assert_eq!(m.counts.tp + m.counts.fp, d.len());
            assert_eq!(m.counts.tp + m.counts.fn_, g.len());
            let mut used = vec![false; d.len()];
            for (gi, mi) in m.gt_match.iter().enumerate() {
                if let Some(di) = mi {
                    assert!(!used[*di], "one-to-one");
                    used[*di] = true;
                    assert!(iou(&d[*di].bbox, &g[gi]).unwrap() >= t);
                }
            }
            let p = m.counts.precision();
            let r = m.counts.recall();
            assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
        }
    }
}

#[test]
fn recall_never_rises_with_iou_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let thresholds: Vec<f64> = (1..=19).map(|i| i as f64 * 0.05).collect();
    for _ in 0..300 {
        let frames: Vec<FrameResult<f64>> = (0..5)
            .map(|_| {
                let g: Vec<_> = (0..rng.random_range(0..8)).map(|_| random_box(&mut rng, 2.5)).collect();
                // Jittered copies of the targets plus clutter keep overlaps dense.
                let mut d: Vec<Detection<f64>> = g
                    .iter()
                    .map(|b| Detection {
                        bbox: OrientedBox::new(
                            b.cx + rng.random_range(-0.8..0.8),
                            b.cy + rng.random_range(-0.8..0.8),
                            b.w * rng.random_range(0.7..1.3),
                            b.l * rng.random_range(0.7..1.3),
                            b.yaw + rng.random_range(-0.5..0.5),
                        ),
                        confidence: rng.random_range(0.0..1.0),
                    })
                    .collect();
                let k = rng.random_range(0..6);
                d.extend(dets(&mut rng, k, 2.5));
                FrameResult { dets: d, gts: g }
            })
            .collect();
        let sweep = pr_vs_iou_sweep(&frames, &thresholds);
        for w in sweep.windows(2) {
            assert!(w[1].recall <= w[0].recall, "{:?}", w);
        }
    }
}

#[test]
fn categories_partition_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut report = EvalReport::default();
    let mut total = 0;
    for _ in 0..200 {
        let g: Vec<_> = (0..rng.random_range(0..6)).map(|_| random_box(&mut rng, 4.0)).collect();
        let (ne, nc) = (rng.random_range(0..6), rng.random_range(0..6));
        let e = dets(&mut rng, ne, 4.0);
        let c = dets(&mut rng, nc, 4.0);
        let cats = categorize_targets(&g, &e, &c, 0.3);
        assert_eq!(cats.len(), g.len());
        let em = match_and_score(&e, &g, 0.3);
        let cm = match_and_score(&c, &g, 0.3);
        for (i, &k) in cats.iter().enumerate() {
            assert_eq!(k as usize, em.gt_match[i].is_some() as usize + cm.gt_match[i].is_some() as usize);
        }
        report.add_frame(&em, &cats, None);
        total += g.len();
    }
    assert_eq!(report.category_targets.iter().sum::<usize>(), total);
    assert_eq!(report.counts.tp + report.counts.fn_, total);
    // The ego run itself hits every category-2 target and no category-0 one.
    assert_eq!(report.category_hits[0], 0);
    assert_eq!(report.category_hits[2], report.category_targets[2]);
}

fn layout() -> HeadLayout {
    HeadLayout { anchors: vec![(1.8, 4.5), (2.0, 3.8)], cell_m: 2.0, extent_m: 4.0, lambda_coord: 5.0, lambda_noobj: 0.5 }
}

#[test]
fn decode_thresholds() {
    let raw = Tensor::filled([1, 14, 4, 4], f64::NEG_INFINITY);
    let grid = DetectionGrid { raw, layout: layout() };
    assert!(decode(&grid, 0.4).is_empty());
    assert_eq!(decode(&grid, 0.0).len(), 2 * 16);
}

#[test]
fn decode_hand_computed_box() {
    let mut raw = Tensor::filled([1, 14, 4, 4], -30.0f64);
    // Second anchor, row 3, col 0.
    let at = |k: usize| (7 + k) * 16 + 3 * 4;
    let d = raw.data_mut();
    d[at(0)] = 0.0;
    d[at(1)] = 2.0;
    d[at(2)] = 0.0;
    d[at(3)] = -0.5;
    d[at(4)] = -1.0;
    d[at(5)] = -1.0;
    d[at(6)] = 0.0;
    let out = decode(&DetectionGrid { raw, layout: layout() }, 0.5);
    assert_eq!(out.len(), 1);
    let b = out[0].bbox;
    let sig2 = 1.0 / (1.0 + (-2.0f64).exp());
    assert!((b.cx - (0.5 * 2.0 - 4.0)).abs() < 1e-12);
    assert!((b.cy - ((3.0 + sig2) * 2.0 - 4.0)).abs() < 1e-12);
    assert!((b.w - 2.0).abs() < 1e-12);
    assert!((b.l - 3.8 * (-0.5f64).exp()).abs() < 1e-12);
    assert!((b.yaw + 3.0 * std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    assert_eq!(out[0].confidence, 0.5);
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(
        ax in -3.0f64..3.0, ay in -3.0f64..3.0, aw in 0.2f64..4.0, al in 0.2f64..6.0, ayaw in -3.2f64..3.2,
        bx in -3.0f64..3.0, by in -3.0f64..3.0, bw in 0.2f64..4.0, bl in 0.2f64..6.0, byaw in -3.2f64..3.2,
    ) {
        let a = OrientedBox::new(ax, ay, aw, al, ayaw);
        let b = OrientedBox::new(bx, by, bw, bl, byaw);
        let ab = iou(&a, &b).unwrap();
        let ba = iou(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&ab));
        // Translation invariance.
        let t = iou(&a.translated(7.5, -2.25), &b.translated(7.5, -2.25)).unwrap();
        prop_assert!((t - ab).abs() < 1e-9);
    }

    #[test]
    fn half_turn_is_the_same_box(x in -3.0f64..3.0, w in 0.5f64..3.0, l in 0.5f64..6.0, yaw in -3.0f64..3.0) {
        let a = OrientedBox::new(x, 0.0, w, l, yaw);
        let b = OrientedBox::new(x, 0.0, w, l, yaw + std::f64::consts::PI);
        prop_assert!(iou(&a, &b).unwrap() > 1.0 - 1e-9);
    }
}
