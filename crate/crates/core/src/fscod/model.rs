use log::warn;

use crate::detect_eval::OrientedBox;
use crate::error::{GeometryError, PipelineError};
use crate::geometry::{cell_offset, project_bev, rotate_to_global, shift_into, translate_featuremap, BevGrid, BevImage, FeatureMap, PointCloud, Pose};
use crate::nn::{Mode, Network, Sgd, Tensor};
use crate::scalar::Scalar;
use crate::transport::FeatureMessage;

use super::config::{PipelineConfig, VALUES_PER_ANCHOR};
use super::head::{detection_loss, DetectionGrid, HeadLayout};

/// Initial confidence logit, so training starts from "nothing here".
const CONF_BIAS_INIT: f64 = -4.0;

/// Rotate a sensor-local sweep to the global orientation and rasterize it.
pub fn bev_from_cloud<T: Scalar, U: Scalar>(cloud: &PointCloud<U>, pose: &Pose, grid: &BevGrid) -> BevImage<T> {
    project_bev(&rotate_to_global(&cloud.cast::<T>(), pose), grid)
}

/// Element-wise sum of two aligned feature maps.
pub fn fuse<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>, GeometryError> {
    if a.shape() != b.shape() {
        return Err(GeometryError::ShapeMismatch(a.shape(), b.shape()));
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
    Ok(FeatureMap { data, ..a.clone() })
}

/// One training frame: both BEV images, both poses and ego-frame targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample<T> {
    pub ego_bev: BevImage<T>,
    pub coop_bev: BevImage<T>,
    pub ego_pose: Pose,
    pub coop_pose: Pose,
    pub targets: Vec<OrientedBox<f64>>,
}

/// Which branch is run (and summed) first in a two-branch pass. The result
/// must not depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchOrder {
    EgoFirst,
    CoopFirst,
}

/// Outcome of a cooperative inference.
#[derive(Debug, Clone, PartialEq)]
pub struct CoopRun<T> {
    pub grid: DetectionGrid<T>,
    /// False when the pipeline fell back to the single-vehicle path.
    pub fused: bool,
    pub warning: Option<String>,
}

/// Feature extractor and detection head. Both the single-vehicle baseline
/// and the cooperative detector are instances of this type; the trained
/// baseline only differs in the width of the extractor's last layer.
#[derive(Debug, Clone)]
pub struct CoopDetector<T: Scalar> {
    config: PipelineConfig,
    pub extractor: Network<T>,
    pub detector: Network<T>,
}

impl<T: Scalar> CoopDetector<T> {
    pub fn new(config: PipelineConfig, seed: u64) -> Result<Self, PipelineError> {
        config.validate()?;
        let extractor = Network::new(BevGrid::CHANNELS, &config.extractor, seed)?;
        let mut detector = Network::new(config.transmitted_channels, &config.detector, seed ^ 0x5eed_d37e_c70f_u64)?;
        let last = detector.layers().len() - 1;
        let l = detector.layers()[last];
        if let crate::nn::LayerSpec::Conv { kernel, out_channels, bias: true } = l.spec {
            let nw = out_channels * l.in_channels * kernel * kernel;
            let p = detector.layer_params_mut(last);
            for a in 0..config.anchors.len() {
                p[nw + a * VALUES_PER_ANCHOR + 6] = T::lit(CONF_BIAS_INIT);
            }
        }
        Ok(Self { config, extractor, detector })
    }

    /// Wrap existing networks, checking they fit the configuration.
    pub fn from_networks(config: PipelineConfig, extractor: Network<T>, detector: Network<T>) -> Result<Self, PipelineError> {
        config.validate()?;
        if extractor.specs() != config.extractor || extractor.input_channels() != BevGrid::CHANNELS {
            return Err(PipelineError::Config("extractor does not match the configured layers".into()));
        }
        if detector.specs() != config.detector || detector.input_channels() != config.transmitted_channels {
            return Err(PipelineError::Config("detector does not match the configured layers".into()));
        }
        Ok(Self { config, extractor, detector })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout::from_config(&self.config)
    }

    pub fn param_count(&self) -> usize {
        self.extractor.param_count() + self.detector.param_count()
    }

    pub fn cast<U: Scalar>(&self) -> CoopDetector<U> {
        CoopDetector { config: self.config.clone(), extractor: self.extractor.cast(), detector: self.detector.cast() }
    }

    fn bev_batch<'a>(&self, bevs: impl Iterator<Item = &'a BevImage<T>>) -> Result<Tensor<T>, PipelineError> {
        let n = self.config.grid.size;
        let mut data = Vec::new();
        let mut count = 0;
        for b in bevs {
            if b.grid.size != n || b.data.len() != BevGrid::CHANNELS * n * n {
                return Err(PipelineError::Config(format!("BEV image of size {} for a {n}-pixel grid", b.grid.size)));
            }
            data.extend_from_slice(&b.data);
            count += 1;
        }
        Ok(Tensor::from_vec([count, BevGrid::CHANNELS, n, n], data)?)
    }

    fn to_map(&self, t: &Tensor<T>, item: usize, origin: Pose) -> FeatureMap<T> {
        FeatureMap {
            channels: t.c(),
            height: t.h(),
            width: t.w(),
            stride: self.config.stride(),
            data: t.item(item).to_vec(),
            origin,
        }
    }

    pub fn extract_features(&self, bev: &BevImage<T>, pose: &Pose) -> Result<FeatureMap<T>, PipelineError> {
        let x = self.bev_batch(std::iter::once(bev))?;
        let f = self.extractor.infer(&x)?;
        Ok(self.to_map(&f, 0, *pose))
    }

    pub fn detect(&self, fused: &FeatureMap<T>) -> Result<DetectionGrid<T>, PipelineError> {
        let x = Tensor::from_vec([1, fused.channels, fused.height, fused.width], fused.data.clone())?;
        Ok(DetectionGrid { raw: self.detector.infer(&x)?, layout: self.layout() })
    }

    pub fn run_baseline(&self, bev: &BevImage<T>) -> Result<DetectionGrid<T>, PipelineError> {
        self.detect(&self.extract_features(bev, &Pose::default())?)
    }

    fn expected_map_shape(&self) -> [usize; 3] {
        let n = self.config.feature_size();
        [self.config.transmitted_channels, n, n]
    }

    /// Cooperative inference from an in-memory coop feature map. A missing
    /// map, or one whose grid does not match, falls back to the baseline.
    pub fn run_coop(&self, ego_bev: &BevImage<T>, ego_pose: &Pose, received: Option<&FeatureMap<T>>) -> Result<CoopRun<T>, PipelineError> {
        let Some(coop) = received else {
            return Ok(CoopRun { grid: self.run_baseline(ego_bev)?, fused: false, warning: None });
        };
        if coop.shape() != self.expected_map_shape() || coop.stride != self.config.stride() {
            let msg = format!(
                "rejecting received map {:?} at stride {}: expected {:?} at stride {}",
                coop.shape(),
                coop.stride,
                self.expected_map_shape(),
                self.config.stride()
            );
            warn!("{msg}");
            return Ok(CoopRun { grid: self.run_baseline(ego_bev)?, fused: false, warning: Some(msg) });
        }
        let own = self.extract_features(ego_bev, ego_pose)?;
        let aligned = translate_featuremap(coop, ego_pose, &coop.origin, self.config.grid.resolution());
        let fused = fuse(&own, &aligned.map)?;
        Ok(CoopRun { grid: self.detect(&fused)?, fused: true, warning: None })
    }

    /// Cooperative inference from a decoded wire message.
    pub fn run_coop_message(&self, ego_bev: &BevImage<T>, ego_pose: &Pose, msg: Option<&FeatureMessage>) -> Result<CoopRun<T>, PipelineError> {
        let map = msg.map(|m| FeatureMap {
            channels: m.map.channels,
            height: m.map.height,
            width: m.map.width,
            stride: m.map.stride,
            data: m.map.data.iter().map(|&v| T::lit(v as f64)).collect(),
            origin: m.map.origin,
        });
        self.run_coop(ego_bev, ego_pose, map.as_ref())
    }

    /// Two-branch forward and backward over a batch, leaving the summed
    /// gradients in both networks. Returns the mean loss.
    ///
    /// The extractor runs once per branch with the same parameters; its
    /// gradient is the sum of the two branch gradients.
    pub fn forward_backward(&mut self, batch: &[&TrainingSample<T>], order: BranchOrder) -> Result<f64, PipelineError> {
        self.extractor.zero_grads();
        self.detector.zero_grads();
        self.extractor.clear_tapes();
        self.detector.clear_tapes();
        let ego = self.bev_batch(batch.iter().map(|s| &s.ego_bev))?;
        let coop = self.bev_batch(batch.iter().map(|s| &s.coop_bev))?;
        let (f_ego, f_coop) = match order {
            BranchOrder::EgoFirst => {
                let a = self.extractor.forward(&ego, Mode::Train)?;
                (a, self.extractor.forward(&coop, Mode::Train)?)
            }
            BranchOrder::CoopFirst => {
                let b = self.extractor.forward(&coop, Mode::Train)?;
                (self.extractor.forward(&ego, Mode::Train)?, b)
            }
        };
        let [_, c, h, w] = f_ego.shape();
        let ppm = self.config.grid.resolution();
        let stride = self.config.stride();
        let offsets: Vec<(i64, i64)> = batch.iter().map(|s| cell_offset(&s.ego_pose, &s.coop_pose, ppm, stride)).collect();

        let mut fused = Tensor::zeros(f_ego.shape());
        let mut shifted = vec![T::zero(); c * h * w];
        for (i, &(dx, dy)) in offsets.iter().enumerate() {
            shifted.iter_mut().for_each(|v| *v = T::zero());
            shift_into(f_coop.item(i), &mut shifted, c, h, w, dx, dy);
            let out = fused.item_mut(i);
            for ((o, &e), &s) in out.iter_mut().zip(f_ego.item(i)).zip(&shifted) {
                *o = match order {
                    BranchOrder::EgoFirst => e + s,
                    BranchOrder::CoopFirst => s + e,
                };
            }
        }

        let raw = self.detector.forward(&fused, Mode::Train)?;
        let targets: Vec<Vec<OrientedBox<f64>>> = batch.iter().map(|s| s.targets.clone()).collect();
        let (loss, grad) = detection_loss(&raw, &targets, &self.layout())?;
        let d_fused = self.detector.backward(&grad)?;

        // The coop branch saw the shift; its adjoint is the opposite shift.
        let mut d_coop = Tensor::zeros(d_fused.shape());
        for (i, &(dx, dy)) in offsets.iter().enumerate() {
            shift_into(d_fused.item(i), d_coop.item_mut(i), c, h, w, -dx, -dy);
        }
        match order {
            BranchOrder::EgoFirst => {
                self.extractor.backward(&d_coop)?;
                self.extractor.backward(&d_fused)?;
            }
            BranchOrder::CoopFirst => {
                self.extractor.backward(&d_fused)?;
                self.extractor.backward(&d_coop)?;
            }
        }
        Ok(loss)
    }

    /// Single-vehicle forward and backward on the ego observations only.
    pub fn forward_backward_baseline(&mut self, batch: &[&TrainingSample<T>]) -> Result<f64, PipelineError> {
        self.extractor.zero_grads();
        self.detector.zero_grads();
        self.extractor.clear_tapes();
        self.detector.clear_tapes();
        let ego = self.bev_batch(batch.iter().map(|s| &s.ego_bev))?;
        let f = self.extractor.forward(&ego, Mode::Train)?;
        let raw = self.detector.forward(&f, Mode::Train)?;
        let targets: Vec<Vec<OrientedBox<f64>>> = batch.iter().map(|s| s.targets.clone()).collect();
        let (loss, grad) = detection_loss(&raw, &targets, &self.layout())?;
        let d = self.detector.backward(&grad)?;
        self.extractor.backward(&d)?;
        Ok(loss)
    }

    /// Loss of the two-branch pass without touching gradients.
    pub fn coop_loss(&self, batch: &[&TrainingSample<T>]) -> Result<f64, PipelineError> {
        let mut targets = Vec::new();
        let mut raws = Vec::new();
        for s in batch {
            let own = self.extract_features(&s.ego_bev, &s.ego_pose)?;
            let coop = self.extract_features(&s.coop_bev, &s.coop_pose)?;
            let aligned = translate_featuremap(&coop, &s.ego_pose, &s.coop_pose, self.config.grid.resolution());
            raws.push(self.detect(&fuse(&own, &aligned.map)?)?.raw);
            targets.push(s.targets.clone());
        }
        let raw = Tensor::stack(&raws)?;
        Ok(detection_loss(&raw, &targets, &self.layout())?.0)
    }
}

/// SGD state for both networks plus optional global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    extractor: Sgd<T>,
    detector: Sgd<T>,
    pub grad_clip: Option<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(momentum: f64, grad_clip: Option<f64>) -> Self {
        Self { extractor: Sgd::new(T::lit(momentum)), detector: Sgd::new(T::lit(momentum)), grad_clip }
    }

    /// Apply the gradients currently stored in `model`.
    pub fn step(&mut self, model: &mut CoopDetector<T>, lr: f64) -> Result<(), PipelineError> {
        if let Some(max) = self.grad_clip {
            let sq: f64 = model.extractor.grads().iter().chain(model.detector.grads()).map(|g| g.as_f64() * g.as_f64()).sum();
            let norm = sq.sqrt();
            if norm.is_finite() && norm > max {
                let a = T::lit(max / norm);
                model.extractor.scale_grads(a);
                model.detector.scale_grads(a);
            }
        }
        self.detector.step(&mut model.detector, T::lit(lr))?;
        self.extractor.step(&mut model.extractor, T::lit(lr))?;
        Ok(())
    }

    /// One cooperative training step; returns the batch loss.
    pub fn train_step(&mut self, model: &mut CoopDetector<T>, batch: &[&TrainingSample<T>], lr: f64) -> Result<f64, PipelineError> {
        let loss = model.forward_backward(batch, BranchOrder::EgoFirst)?;
        self.step(model, lr)?;
        Ok(loss)
    }

    /// One single-vehicle training step; returns the batch loss.
    pub fn train_step_baseline(&mut self, model: &mut CoopDetector<T>, batch: &[&TrainingSample<T>], lr: f64) -> Result<f64, PipelineError> {
        let loss = model.forward_backward_baseline(batch)?;
        self.step(model, lr)?;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fscod::config::Preset;
    use crate::nn::LayerSpec;

    fn tiny_config() -> PipelineConfig {
        let mut grid = BevGrid::new(8.0, 16).unwrap();
        grid.n_max = Some(4.0);
        PipelineConfig {
            grid,
            extractor: vec![LayerSpec::conv(3, 4), LayerSpec::LeakyRelu, LayerSpec::MaxPool, LayerSpec::conv(1, 2)],
            detector: vec![LayerSpec::conv(1, 14)],
            transmitted_channels: 2,
            anchors: vec![(1.8, 4.5), (2.0, 3.8)],
            conf_threshold: 0.4,
            nms_iou: 0.5,
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
        }
    }

    fn bev(grid: &BevGrid, seed: usize) -> BevImage<f64> {
        let mut b = BevImage::zeros(*grid);
        b.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 7 + seed * 13) % 11) as f64 / 10.0);
        b
    }

    #[test]
    fn missing_message_equals_baseline() {
        let m = CoopDetector::<f64>::new(tiny_config(), 3).unwrap();
        let b = bev(&m.config().grid, 1);
        let base = m.run_baseline(&b).unwrap();
        let coop = m.run_coop(&b, &Pose::planar(4.0, 1.0, 0.0), None).unwrap();
        assert_eq!(coop.grid, base);
        assert!(!coop.fused);
    }

    #[test]
    fn mismatched_map_is_rejected() {
        let m = CoopDetector::<f64>::new(tiny_config(), 3).unwrap();
        let b = bev(&m.config().grid, 1);
        let wrong = FeatureMap::zeros(3, 8, 8, 2, Pose::default());
        let run = m.run_coop(&b, &Pose::default(), Some(&wrong)).unwrap();
        assert!(run.warning.is_some() && !run.fused);
        assert_eq!(run.grid, m.run_baseline(&b).unwrap());
    }

    #[test]
    fn self_fusion_doubles_features() {
        let m = CoopDetector::<f64>::new(tiny_config(), 3).unwrap();
        let b = bev(&m.config().grid, 2);
        let f = m.extract_features(&b, &Pose::default()).unwrap();
        let two = fuse(&f, &f).unwrap();
        assert!(two.data.iter().zip(&f.data).all(|(a, b)| *a == 2.0 * b));
        let run = m.run_coop(&b, &Pose::default(), Some(&f)).unwrap();
        assert!(run.fused);
        assert_eq!(run.grid, m.detect(&two).unwrap());
    }

    #[test]
    fn fuse_rejects_shape_mismatch() {
        let a = FeatureMap::<f32>::zeros(2, 4, 4, 2, Pose::default());
        let b = FeatureMap::<f32>::zeros(2, 4, 2, 2, Pose::default());
        assert!(matches!(fuse(&a, &b), Err(GeometryError::ShapeMismatch(..))));
    }

    #[test]
    fn conf_bias_starts_low() {
        let m = CoopDetector::<f32>::new(PipelineConfig::reference(Preset::Lo, 4, 16, 8), 1).unwrap();
        let b = BevImage::zeros(m.config().grid);
        let g = m.run_baseline(&b).unwrap();
        assert!(g.value(0, 6, 3, 3) < -1.0);
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = tiny_config();
        let mut m = CoopDetector::<f64>::new(cfg.clone(), 9).unwrap();
        let s = TrainingSample {
            ego_bev: bev(&cfg.grid, 1),
            coop_bev: bev(&cfg.grid, 2),
            ego_pose: Pose::planar(0.0, 0.0, 0.0),
            coop_pose: Pose::planar(2.0, -1.0, 0.0),
            targets: vec![OrientedBox::new(1.0, 2.0, 1.8, 4.4, 0.1)],
        };
        let mut t = Trainer::new(0.9, Some(10.0));
        let first = t.train_step(&mut m, &[&s], 0.01).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = t.train_step(&mut m, &[&s], 0.01).unwrap();
        }
        assert!(last < first, "{last} !< {first}");
    }
}
