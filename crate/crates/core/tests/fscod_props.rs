use fscod::detect_eval::{decode, OrientedBox};
use fscod::fscod::{
    detection_loss, fuse, sigmoid, BranchOrder, CoopDetector, HeadLayout, PipelineConfig, Preset, TrainingSample,
    VALUES_PER_ANCHOR,
};
use fscod::geometry::{cell_offset, shift_featuremap, translate_featuremap, BevGrid, BevImage, FeatureMap, Pose};
use fscod::nn::{LayerSpec, Mode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config(extractor: Vec<LayerSpec>, detector: Vec<LayerSpec>, transmitted: usize) -> PipelineConfig {
    let mut grid = BevGrid::new(4.0, 8).unwrap();
    grid.n_max = Some(4.0);
    PipelineConfig {
        grid,
        extractor,
        detector,
        transmitted_channels: transmitted,
        anchors: vec![(1.8, 4.5), (2.0, 3.8)],
        conf_threshold: 0.4,
        nms_iou: 0.5,
        lambda_coord: 5.0,
        lambda_noobj: 0.5,
    }
}

/// Extractor and head of one conv each, with one pool so shifts move whole
/// cells of two pixels.
fn two_conv() -> PipelineConfig {
    toy_config(vec![LayerSpec::MaxPool, LayerSpec::conv(1, 3)], vec![LayerSpec::conv(1, 14)], 3)
}

fn deeper() -> PipelineConfig {
    toy_config(
        vec![LayerSpec::conv(3, 4), LayerSpec::ChannelNorm, LayerSpec::LeakyRelu, LayerSpec::MaxPool, LayerSpec::conv(1, 3)],
        vec![LayerSpec::conv(3, 6), LayerSpec::LeakyRelu, LayerSpec::conv(1, 14)],
        3,
    )
}

fn random_bev(rng: &mut ChaCha8Rng, grid: &BevGrid) -> BevImage<f64> {
    let mut b = BevImage::zeros(*grid);
    // Dense values: empty patches would tie inside max-pool windows, where
    // the loss has a kink and finite differences are meaningless.
    for v in &mut b.data {
        *v = rng.random_range(0.0..1.0);
    }
    b
}

fn random_sample(rng: &mut ChaCha8Rng, cfg: &PipelineConfig) -> TrainingSample<f64> {
    let cell = cfg.cell_m();
    let n = cfg.feature_size() as i64;
    // Half-cell positions keep floor() away from cell boundaries.
    let ex = rng.random_range(-20..20) as f64 + 0.5;
    let ey = rng.random_range(-20..20) as f64 + 0.5;
    let ego = Pose::planar(ex * cell, ey * cell, rng.random_range(-3.0..3.0));
    let coop = Pose::planar((ex + rng.random_range(-n + 1..n) as f64) * cell, (ey + rng.random_range(-n + 1..n) as f64) * cell, 0.3);
    let e = cfg.grid.extent_m;
    let targets = (0..rng.random_range(0..4))
        .map(|_| {
            OrientedBox::new(
                rng.random_range(-e..e - 1e-6),
                rng.random_range(-e..e - 1e-6),
                rng.random_range(1.5..2.2),
                rng.random_range(3.5..5.0),
                rng.random_range(-3.0..3.0),
            )
        })
        .collect();
    TrainingSample { ego_bev: random_bev(rng, &cfg.grid), coop_bev: random_bev(rng, &cfg.grid), ego_pose: ego, coop_pose: coop, targets }
}

fn model(cfg: PipelineConfig, seed: u64) -> CoopDetector<f64> {
    let mut m = CoopDetector::<f64>::new(cfg, seed).unwrap();
    // Move the confidence logits off their saturated start.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
    for p in m.detector.params_mut().iter_mut().chain(m.extractor.params_mut()) {
        *p += rng.random_range(-0.05..0.05);
    }
    // Keep the size logits small so the loss stays O(10) and finite
    // differences are not swamped by rounding.
    let last = m.detector.layers().len() - 1;
    for p in m.detector.layer_params_mut(last) {
        *p *= 0.2;
    }
    m
}

fn batch(rng: &mut ChaCha8Rng, cfg: &PipelineConfig, n: usize) -> Vec<TrainingSample<f64>> {
    (0..n).map(|_| random_sample(rng, cfg)).collect()
}

fn refs(b: &[TrainingSample<f64>]) -> Vec<&TrainingSample<f64>> {
    b.iter().collect()
}

fn fd_check(cfg: PipelineConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = batch(&mut rng, &cfg, 3);
    let b = refs(&samples);
    let mut m = model(cfg, seed);
    let loss = m.forward_backward(&b, BranchOrder::EgoFirst).unwrap();
    assert!((loss - m.coop_loss(&b).unwrap()).abs() < 1e-10);
    let g_ext = m.extractor.grads().to_vec();
    let g_det = m.detector.grads().to_vec();
    let eps = 1e-6;
    let mut worst = 0.0f64;
    fn net(m: &mut CoopDetector<f64>, which: usize) -> &mut [f64] {
        if which == 0 {
            m.extractor.params_mut()
        } else {
            m.detector.params_mut()
        }
    }
    for (which, grads) in [(0, &g_ext), (1, &g_det)] {
        for i in 0..grads.len() {
            let orig = net(&mut m, which)[i];
            net(&mut m, which)[i] = orig + eps;
            let up = m.coop_loss(&b).unwrap();
            net(&mut m, which)[i] = orig - eps;
            let down = m.coop_loss(&b).unwrap();
            net(&mut m, which)[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let rel = (grads[i] - fd).abs() / grads[i].abs().max(fd.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn two_branch_gradient_matches_finite_differences() {
    fd_check(two_conv(), 1);
    fd_check(two_conv(), 2);
}

#[test]
fn deeper_two_branch_gradient_matches_finite_differences() {
    fd_check(deeper(), 3);
}

fn bev_tensor(bevs: &[&BevImage<f64>]) -> Tensor<f64> {
    let n = bevs[0].grid.size;
    let data: Vec<f64> = bevs.iter().flat_map(|b| b.data.iter().copied()).collect();
    Tensor::from_vec([bevs.len(), 3, n, n], data).unwrap()
}

/// Gradient of one branch alone, using a separate extractor copy so the
/// other branch is a constant.
fn branch_gradient(m: &CoopDetector<f64>, samples: &[&TrainingSample<f64>], coop_branch: bool) -> Vec<f64> {
    let cfg = m.config().clone();
    let mut live = m.extractor.clone();
    let frozen = m.extractor.clone();
    let mut det = m.detector.clone();
    live.zero_grads();
    let ego = bev_tensor(&samples.iter().map(|s| &s.ego_bev).collect::<Vec<_>>());
    let coop = bev_tensor(&samples.iter().map(|s| &s.coop_bev).collect::<Vec<_>>());
    let (fe, fc) = if coop_branch {
        (frozen.infer(&ego).unwrap(), live.forward(&coop, Mode::Train).unwrap())
    } else {
        (live.forward(&ego, Mode::Train).unwrap(), frozen.infer(&coop).unwrap())
    };
    let [_, c, h, w] = fe.shape();
    let ppm = cfg.grid.resolution();
    let mut fused = fe.clone();
    let mut offsets = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let (dx, dy) = cell_offset(&s.ego_pose, &s.coop_pose, ppm, cfg.stride());
        offsets.push((dx, dy));
        let map = FeatureMap { channels: c, height: h, width: w, stride: cfg.stride(), data: fc.item(i).to_vec(), origin: s.coop_pose };
        let shifted = shift_featuremap(&map, dx, dy);
        for (o, v) in fused.item_mut(i).iter_mut().zip(&shifted.data) {
            *o += v;
        }
    }
    let raw = det.forward(&fused, Mode::Train).unwrap();
    let targets: Vec<_> = samples.iter().map(|s| s.targets.clone()).collect();
    let (_, g) = detection_loss(&raw, &targets, &m.layout()).unwrap();
    let d = det.backward(&g).unwrap();
    let upstream = if coop_branch {
        let mut t = Tensor::zeros(d.shape());
        for (i, &(dx, dy)) in offsets.iter().enumerate() {
            let map = FeatureMap { channels: c, height: h, width: w, stride: 1, data: d.item(i).to_vec(), origin: Pose::default() };
            t.item_mut(i).copy_from_slice(&shift_featuremap(&map, -dx, -dy).data);
        }
        t
    } else {
        d
    };
    live.backward(&upstream).unwrap();
    live.grads().to_vec()
}

#[test]
fn extractor_gradient_is_sum_of_branch_gradients() {
    for (cfg, seed) in [(two_conv(), 10), (deeper(), 11), (deeper(), 12)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = batch(&mut rng, &cfg, 4);
        let b = refs(&samples);
        let mut m = model(cfg, seed);
        let ge = branch_gradient(&m, &b, false);
        let gc = branch_gradient(&m, &b, true);
        m.forward_backward(&b, BranchOrder::EgoFirst).unwrap();
        for ((g, x), y) in m.extractor.grads().iter().zip(&ge).zip(&gc) {
            assert!((g - (x + y)).abs() < 1e-6, "{g} vs {x} + {y}");
        }
        // A single shared parameter vector.
        assert_eq!(m.extractor.params().len(), ge.len());
    }
}

#[test]
fn branch_order_does_not_change_loss_or_gradients() {
    let cfg = deeper();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..20 {
        let samples = batch(&mut rng, &cfg, 2);
        let b = refs(&samples);
        let mut m = model(cfg.clone(), rng.random());
        let la = m.forward_backward(&b, BranchOrder::EgoFirst).unwrap();
        let ga = (m.extractor.grads().to_vec(), m.detector.grads().to_vec());
        let lb = m.forward_backward(&b, BranchOrder::CoopFirst).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga.1, m.detector.grads());
        for (x, y) in ga.0.iter().zip(m.extractor.grads()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

#[test]
fn colocated_vehicles_may_swap_observations() {
    let cfg = deeper();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let mut s = random_sample(&mut rng, &cfg);
        s.coop_pose = Pose { yaw: 1.0, ..s.ego_pose };
        let mut swapped = s.clone();
        std::mem::swap(&mut swapped.ego_bev, &mut swapped.coop_bev);
        let m = model(cfg.clone(), rng.random());
        let a = m.coop_loss(&[&s]).unwrap();
        let b = m.coop_loss(&[&swapped]).unwrap();
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

/// Cooperative inference seen from each vehicle agrees, cell for cell, on
/// the area both grids cover (1x1 head, so cells do not mix).
#[test]
fn swapping_roles_gives_the_same_world_detections() {
    let cfg = two_conv();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let s = random_sample(&mut rng, &cfg);
        let m = model(cfg.clone(), rng.random());
        let fe = m.extract_features(&s.ego_bev, &s.ego_pose).unwrap();
        let fc = m.extract_features(&s.coop_bev, &s.coop_pose).unwrap();
        let a = m.run_coop(&s.ego_bev, &s.ego_pose, Some(&fc)).unwrap();
        let b = m.run_coop(&s.coop_bev, &s.coop_pose, Some(&fe)).unwrap();
        assert!(a.fused && b.fused);
        let (dx, dy) = cell_offset(&s.ego_pose, &s.coop_pose, cfg.grid.resolution(), cfg.stride());
        let da = decode(&a.grid, 0.0);
        let db = decode(&b.grid, 0.0);
        let n = cfg.feature_size() as i64;
        let per_anchor = (n * n) as usize;
        let mut compared = 0;
        for anchor in 0..2 {
            for row in 0..n {
                for col in 0..n {
                    let (r2, c2) = (row + dy, col + dx);
                    if !(0..n).contains(&r2) || !(0..n).contains(&c2) {
                        continue;
                    }
                    for k in 0..VALUES_PER_ANCHOR {
                        assert_eq!(
                            a.grid.value(anchor, k, row as usize, col as usize),
                            b.grid.value(anchor, k, r2 as usize, c2 as usize)
                        );
                    }
                    let x = &da[anchor * per_anchor + (row * n + col) as usize];
                    let y = &db[anchor * per_anchor + (r2 * n + c2) as usize];
                    assert!((x.bbox.cx + s.ego_pose.x - (y.bbox.cx + s.coop_pose.x)).abs() < 1e-9);
                    assert!((x.bbox.cy + s.ego_pose.y - (y.bbox.cy + s.coop_pose.y)).abs() < 1e-9);
                    assert_eq!(x.confidence, y.confidence);
                    compared += 1;
                }
            }
        }
        assert!(compared > 0);
    }
}

#[test]
fn fuse_is_bit_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..1000 {
        let (c, h, w) = (rng.random_range(1..5), rng.random_range(1..9), rng.random_range(1..9));
        let mut a = FeatureMap::<f32>::zeros(c, h, w, 8, Pose::default());
        let mut b = a.clone();
        for v in a.data.iter_mut().chain(b.data.iter_mut()) {
            *v = rng.random_range(-1e3..1e3) * 10f32.powi(rng.random_range(-8..8));
        }
        let ab = fuse(&a, &b).unwrap();
        let ba = fuse(&b, &a).unwrap();
        assert!(ab.data.iter().zip(&ba.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn zero_coop_input_reduces_to_baseline() {
    let cfg = toy_config(
        vec![LayerSpec::conv_no_bias(3, 4), LayerSpec::LeakyRelu, LayerSpec::MaxPool, LayerSpec::conv_no_bias(1, 3)],
        vec![LayerSpec::conv(3, 6), LayerSpec::LeakyRelu, LayerSpec::conv(1, 14)],
        3,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..20 {
        let s = random_sample(&mut rng, &cfg);
        let m = model(cfg.clone(), rng.random());
        let zero = m.extract_features(&BevImage::zeros(cfg.grid), &s.coop_pose).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        let run = m.run_coop(&s.ego_bev, &s.ego_pose, Some(&zero)).unwrap();
        assert!(run.fused);
        assert_eq!(run.grid, m.run_baseline(&s.ego_bev).unwrap());
    }
}

#[test]
fn baseline_is_extractor_then_detector() {
    let cfg = deeper();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let m = model(cfg.clone(), 5);
    for _ in 0..10 {
        let s = random_sample(&mut rng, &cfg);
        let by_hand = m.detector.infer(&m.extractor.infer(&bev_tensor(&[&s.ego_bev])).unwrap()).unwrap();
        assert_eq!(m.run_baseline(&s.ego_bev).unwrap().raw, by_hand);
        assert_eq!(m.run_coop(&s.ego_bev, &s.ego_pose, None).unwrap().grid, m.run_baseline(&s.ego_bev).unwrap());
    }
}

fn conv_params(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin * cout + cout
}

#[test]
fn reference_parameter_counts() {
    for (preset, ed, dd, ct) in [(Preset::Lo, 4, 16, 8), (Preset::Hi, 1, 1, 64), (Preset::Lo, 2, 8, 1)] {
        let cfg = PipelineConfig::reference(preset, ed, dd, ct);
        let m = CoopDetector::<f32>::new(cfg.clone(), 0).unwrap();
        // Extractor: conv + norm blocks over the reference widths, then the C_t projection.
        let widths = [24, 48, 64, 32, 64, 128, 64, 128];
        let mut cin = 3;
        let mut want = 0;
        for w in widths {
            let w = (w / ed).max(1);
            want += conv_params(3, cin, w) + 2 * w;
            cin = w;
        }
        let last_w = (128 / ed).max(1);
        want += conv_params(3, cin, last_w) + 2 * last_w + conv_params(1, last_w, ct);
        assert_eq!(m.extractor.param_count(), want, "{preset:?} ed {ed}");

        let mut cin = ct;
        let mut want = 0;
        for (w, k) in [(128, 1), (256, 3), (512, 1), (1024, 1), (2048, 3), (1024, 1), (2048, 1), (1024, 3)] {
            let w = (w / dd).max(1);
            want += conv_params(k, cin, w) + 2 * w;
            cin = w;
        }
        want += conv_params(1, cin, 14);
        assert_eq!(m.detector.param_count(), want);
        assert_eq!(m.param_count(), m.extractor.param_count() + m.detector.param_count());
        assert_eq!(cfg.feature_size(), if preset == Preset::Hi { 8 } else { 16 });
    }
}

/// Straight-line re-derivation of the loss for one target.
#[test]
fn loss_matches_hand_computation() {
    let layout = HeadLayout { anchors: vec![(1.8, 4.5), (2.0, 3.8)], cell_m: 2.0, extent_m: 4.0, lambda_coord: 5.0, lambda_noobj: 0.5 };
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let raw_data: Vec<f64> = (0..14 * 16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let raw = Tensor::from_vec([1, 14, 4, 4], raw_data.clone()).unwrap();
    // Centre (1.3, -2.9): col 2, row 0, offsets 0.65 and 0.55; the 2.0 x 3.8
    // box fits the second anchor best.
    let g = OrientedBox::new(1.3, -2.9, 2.0, 3.8, 2.6);
    let (loss, _) = detection_loss(&raw, &[vec![g]], &layout).unwrap();

    let at = |a: usize, k: usize, row: usize, col: usize| raw_data[(a * 7 + k) * 16 + row * 4 + col];
    let (a, row, col) = (1usize, 0usize, 2usize);
    let yaw = 2.6 - std::f64::consts::PI;
    let target = [0.65, 0.55, 2.0f64.sqrt(), 3.8f64.sqrt(), yaw.sin(), yaw.cos()];
    let pred = [
        sigmoid(at(a, 0, row, col)),
        sigmoid(at(a, 1, row, col)),
        (2.0 * at(a, 2, row, col).exp()).sqrt(),
        (3.8 * at(a, 3, row, col).exp()).sqrt(),
        at(a, 4, row, col),
        at(a, 5, row, col),
    ];
    let mut want = 0.0;
    for k in 0..6 {
        want += 5.0 * (pred[k] - target[k]).powi(2);
    }
    want += (sigmoid(at(a, 6, row, col)) - 1.0).powi(2);
    for aa in 0..2 {
        for r in 0..4 {
            for c in 0..4 {
                if (aa, r, c) != (a, row, col) {
                    want += 0.5 * sigmoid(at(aa, 6, r, c)).powi(2);
                }
            }
        }
    }
    assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let layout = HeadLayout { anchors: vec![(1.8, 4.5), (2.0, 3.8)], cell_m: 2.0, extent_m: 4.0, lambda_coord: 5.0, lambda_noobj: 0.5 };
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let raw = Tensor::from_vec([2, 14, 4, 4], (0..2 * 14 * 16).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let targets = vec![
        vec![OrientedBox::new(1.3, -2.9, 2.0, 3.8, 2.6), OrientedBox::new(-3.0, 3.0, 1.7, 4.6, -0.4)],
        vec![OrientedBox::new(0.1, 0.1, 1.9, 4.1, 1.0)],
    ];
    let (_, g) = detection_loss(&raw, &targets, &layout).unwrap();
    let eps = 1e-6;
    let mut p = raw.clone();
    for i in 0..raw.len() {
        let orig = raw.data()[i];
        p.data_mut()[i] = orig + eps;
        let up = detection_loss(&p, &targets, &layout).unwrap().0;
        p.data_mut()[i] = orig - eps;
        let down = detection_loss(&p, &targets, &layout).unwrap().0;
        p.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        assert!((g.data()[i] - fd).abs() < 1e-7, "index {i}: {} vs {fd}", g.data()[i]);
    }
}

#[test]
fn empty_scene_with_silent_head_costs_nothing() {
    let layout = HeadLayout { anchors: vec![(1.8, 4.5), (2.0, 3.8)], cell_m: 2.0, extent_m: 4.0, lambda_coord: 5.0, lambda_noobj: 0.5 };
    let mut raw = Tensor::filled([1, 14, 4, 4], 0.3f64);
    for a in 0..2 {
        for cell in 0..16 {
            raw.data_mut()[(a * 7 + 6) * 16 + cell] = -1e3;
        }
    }
    let (loss, grad) = detection_loss(&raw, &[vec![]], &layout).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.data().iter().all(|&g| g == 0.0));
}

#[test]
fn received_map_survives_cast_and_alignment() {
    let cfg = deeper();
    let m = model(cfg.clone(), 30);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let s = random_sample(&mut rng, &cfg);
    let fc = m.extract_features(&s.coop_bev, &s.coop_pose).unwrap();
    let aligned = translate_featuremap(&fc, &s.ego_pose, &s.coop_pose, cfg.grid.resolution());
    let own = m.extract_features(&s.ego_bev, &s.ego_pose).unwrap();
    let by_hand = m.detect(&fuse(&own, &aligned.map).unwrap()).unwrap();
    assert_eq!(m.run_coop(&s.ego_bev, &s.ego_pose, Some(&fc)).unwrap().grid, by_hand);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn training_loss_is_finite_and_nonnegative(seed in any::<u64>()) {
        let cfg = deeper();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = batch(&mut rng, &cfg, 2);
        let mut m = model(cfg, seed);
        let l = m.forward_backward(&refs(&samples), BranchOrder::EgoFirst).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
        prop_assert!(m.extractor.grads().iter().all(|g| g.is_finite()));
    }
}
