use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    conv_backward_item, conv_forward_item, maxpool_forward_item, norm_backward_item,
    norm_forward_item, ConvGeom, LayerSpec, LEAKY_SLOPE,
};
use super::tensor::Tensor;
use crate::error::NnError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Cache activations for a later [`Network::backward`].
    Train,
    Eval,
}

/// A layer resolved against its input channel count and parameter slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub offset: usize,
    pub len: usize,
}

enum Cache<T> {
    /// Unrolled columns (3x3) or the raw input (1x1), per batch item.
    Conv(Vec<Vec<T>>),
    Pool { argmax: Vec<Vec<u32>>, in_shape: [usize; 4] },
    Norm { xhat: Vec<Vec<T>>, inv_std: Vec<Vec<T>> },
    Leaky(Vec<bool>),
}

struct Tape<T> {
    in_shape: [usize; 4],
    out_shape: [usize; 4],
    caches: Vec<(Cache<T>, [usize; 4])>,
}

/// Feed-forward stack of conv / pool / norm / activation layers over a flat
/// parameter store.
///
/// Train-mode forwards push an activation tape; each `backward` pops the most
/// recent one, so a shared network can be run on several inputs and then
/// back-propagated once per input with gradients accumulating in one store.
pub struct Network<T> {
    input_channels: usize,
    layers: Vec<Layer>,
    params: Vec<T>,
    grads: Vec<T>,
    tapes: Vec<Tape<T>>,
}

impl<T: Scalar> Clone for Network<T> {
    fn clone(&self) -> Self {
        Self {
            input_channels: self.input_channels,
            layers: self.layers.clone(),
            params: self.params.clone(),
            grads: self.grads.clone(),
            tapes: Vec::new(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("input_channels", &self.input_channels)
            .field("layers", &self.layers)
            .field("params", &self.params.len())
            .finish()
    }
}

impl<T: Scalar> Network<T> {
    /// Build with Kaiming-uniform conv weights, zero biases, unit norm scale.
    pub fn new(input_channels: usize, specs: &[LayerSpec], seed: u64) -> Result<Self, NnError> {
        let mut net = Self::zeroed(input_channels, specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &net.layers {
            match layer.spec {
                LayerSpec::Conv { kernel, out_channels, .. } => {
                    let fan_in = layer.in_channels * kernel * kernel;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let nw = out_channels * fan_in;
                    for v in &mut net.params[layer.offset..layer.offset + nw] {
                        *v = T::lit(rng.random_range(-bound..bound));
                    }
                }
                LayerSpec::ChannelNorm => {
                    let c = layer.in_channels;
                    net.params[layer.offset..layer.offset + c].iter_mut().for_each(|v| *v = T::one());
                }
                _ => {}
            }
        }
        Ok(net)
    }

    /// All parameters zero (norm scale included).
    pub fn zeroed(input_channels: usize, specs: &[LayerSpec]) -> Result<Self, NnError> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut channels = input_channels;
        let mut offset = 0;
        for (i, spec) in specs.iter().enumerate() {
            if let LayerSpec::Conv { kernel, out_channels, .. } = *spec {
                if kernel != 1 && kernel != 3 {
                    return Err(NnError::Shape { layer: i, reason: format!("kernel {kernel} not in {{1, 3}}") });
                }
                if out_channels == 0 {
                    return Err(NnError::Shape { layer: i, reason: "zero output channels".into() });
                }
            }
            let len = spec.param_count(channels);
            let out = spec.output_channels(channels);
            layers.push(Layer { spec: *spec, in_channels: channels, out_channels: out, offset, len });
            offset += len;
            channels = out;
        }
        Ok(Self {
            input_channels,
            layers,
            params: vec![T::zero(); offset],
            grads: vec![T::zero(); offset],
            tapes: Vec::new(),
        })
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(self.input_channels, |l| l.out_channels)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn grads(&self) -> &[T] {
        &self.grads
    }

    pub(crate) fn params_and_grads(&mut self) -> (&mut [T], &[T]) {
        (&mut self.params, &self.grads)
    }

    pub fn layer_params(&self, i: usize) -> &[T] {
        let l = &self.layers[i];
        &self.params[l.offset..l.offset + l.len]
    }

    pub fn layer_params_mut(&mut self, i: usize) -> &mut [T] {
        let l = self.layers[i];
        &mut self.params[l.offset..l.offset + l.len]
    }

    pub fn layer_grads(&self, i: usize) -> &[T] {
        let l = &self.layers[i];
        &self.grads[l.offset..l.offset + l.len]
    }

    /// Layer owning flat parameter index `p`.
    pub fn layer_of_param(&self, p: usize) -> Option<usize> {
        self.layers.iter().position(|l| p >= l.offset && p < l.offset + l.len)
    }

    pub fn maxpool_count(&self) -> usize {
        self.layers.iter().filter(|l| l.spec == LayerSpec::MaxPool).count()
    }

    /// Spatial downsampling factor, `2^maxpools`.
    pub fn downsampling(&self) -> usize {
        1 << self.maxpool_count()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn scale_grads(&mut self, a: T) {
        self.grads.iter_mut().for_each(|g| *g *= a);
    }

    /// Number of train-mode forwards still waiting for a backward.
    pub fn pending_tapes(&self) -> usize {
        self.tapes.len()
    }

    pub fn clear_tapes(&mut self) {
        self.tapes.clear();
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let (out, tape) = self.run(x, mode == Mode::Train)?;
        if let Some(t) = tape {
            self.tapes.push(t);
        }
        Ok(out)
    }

    /// Eval-mode forward through a shared reference.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        Ok(self.run(x, false)?.0)
    }

    fn run(&self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, Option<Tape<T>>), NnError> {
        if x.c() != self.input_channels {
            return Err(NnError::Shape {
                layer: 0,
                reason: format!("input has {} channels, network expects {}", x.c(), self.input_channels),
            });
        }
        if !x.is_finite() {
            return Err(NnError::NonFinite { layer: 0, stage: "input" });
        }
        let mut caches = Vec::with_capacity(if train { self.layers.len() } else { 0 });
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape = cur.shape();
            let (next, cache) = self.layer_forward(i, layer, cur, train)?;
            if !next.is_finite() {
                return Err(NnError::NonFinite { layer: i, stage: "forward" });
            }
            if let Some(c) = cache {
                caches.push((c, in_shape));
            }
            cur = next;
        }
        let tape = train.then(|| Tape { in_shape: x.shape(), out_shape: cur.shape(), caches });
        Ok((cur, tape))
    }

    fn layer_forward(
        &self,
        i: usize,
        layer: &Layer,
        input: Tensor<T>,
        train: bool,
    ) -> Result<(Tensor<T>, Option<Cache<T>>), NnError> {
        let [n, c, h, w] = input.shape();
        let p = &self.params[layer.offset..layer.offset + layer.len];
        match layer.spec {
            LayerSpec::Conv { kernel, out_channels, bias } => {
                let g = ConvGeom { kernel, cin: c, cout: out_channels, h, w };
                let nw = out_channels * c * kernel * kernel;
                let (weights, b) = (&p[..nw], bias.then(|| &p[nw..]));
                let mut out = Tensor::zeros([n, out_channels, h, w]);
                let mut kept = Vec::new();
                for item in 0..n {
                    let cols = conv_forward_item(&g, weights, b, input.item(item), out.item_mut(item), train);
                    if train {
                        kept.push(cols.unwrap_or_else(|| input.item(item).to_vec()));
                    }
                }
                Ok((out, train.then_some(Cache::Conv(kept))))
            }
            LayerSpec::MaxPool => {
                if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                    return Err(NnError::Shape { layer: i, reason: format!("maxpool needs even spatial dims, got {h}x{w}") });
                }
                let mut out = Tensor::zeros([n, c, h / 2, w / 2]);
                let mut args = Vec::new();
                for item in 0..n {
                    let a = maxpool_forward_item(input.item(item), c, h, w, out.item_mut(item));
                    if train {
                        args.push(a);
                    }
                }
                Ok((out, train.then_some(Cache::Pool { argmax: args, in_shape: input.shape() })))
            }
            LayerSpec::ChannelNorm => {
                let (scale, shift) = p.split_at(c);
                let mut out = Tensor::zeros(input.shape());
                let (mut xh, mut inv) = (Vec::new(), Vec::new());
                for item in 0..n {
                    let (a, b) = norm_forward_item(input.item(item), c, h * w, scale, shift, out.item_mut(item));
                    if train {
                        xh.push(a);
                        inv.push(b);
                    }
                }
                Ok((out, train.then_some(Cache::Norm { xhat: xh, inv_std: inv })))
            }
            LayerSpec::LeakyRelu => {
                let slope = T::lit(LEAKY_SLOPE);
                let mask: Vec<bool> = if train { input.data().iter().map(|&v| v > T::zero()).collect() } else { Vec::new() };
                let mut out = input;
                out.data_mut().iter_mut().for_each(|v| {
                    if *v <= T::zero() {
                        *v *= slope;
                    }
                });
                Ok((out, train.then_some(Cache::Leaky(mask))))
            }
        }
    }

    /// Back-propagate through the most recent train-mode forward.
    /// Parameter gradients accumulate; returns the input gradient.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let tape = self.tapes.pop().ok_or(NnError::NoForwardCache)?;
        if upstream.shape() != tape.out_shape {
            let last = self.layers.len().saturating_sub(1);
            let reason = format!("upstream gradient shape {:?} != output shape {:?}", upstream.shape(), tape.out_shape);
            self.tapes.push(tape);
            return Err(NnError::Shape { layer: last, reason });
        }
        let mut grad = upstream.clone();
        for (i, (cache, in_shape)) in tape.caches.into_iter().enumerate().rev() {
            let layer = self.layers[i];
            grad = self.layer_backward(&layer, cache, in_shape, grad);
        }
        debug_assert_eq!(grad.shape(), tape.in_shape);
        Ok(grad)
    }

    fn layer_backward(&mut self, layer: &Layer, cache: Cache<T>, in_shape: [usize; 4], upstream: Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = in_shape;
        let (p, g) = (
            &self.params[layer.offset..layer.offset + layer.len],
            &mut self.grads[layer.offset..layer.offset + layer.len],
        );
        match (layer.spec, cache) {
            (LayerSpec::Conv { kernel, out_channels, bias }, Cache::Conv(cols)) => {
                let geom = ConvGeom { kernel, cin: c, cout: out_channels, h, w };
                let nw = out_channels * c * kernel * kernel;
                let weights = &p[..nw];
                let (gw, gb) = g.split_at_mut(nw);
                let mut gb = bias.then_some(gb);
                let mut dx = Tensor::zeros(in_shape);
                for (item, col) in cols.iter().enumerate() {
                    conv_backward_item(&geom, weights, col, upstream.item(item), gw, gb.as_deref_mut(), dx.item_mut(item));
                }
                dx
            }
            (LayerSpec::MaxPool, Cache::Pool { argmax, in_shape }) => {
                let mut dx = Tensor::zeros(in_shape);
                for (item, arg) in argmax.iter().enumerate() {
                    let up = upstream.item(item);
                    let d = dx.item_mut(item);
                    for (o, &src) in arg.iter().enumerate() {
                        d[src as usize] += up[o];
                    }
                }
                dx
            }
            (LayerSpec::ChannelNorm, Cache::Norm { xhat, inv_std }) => {
                let scale = &p[..c];
                let (gs, gsh) = g.split_at_mut(c);
                let mut dx = Tensor::zeros(in_shape);
                for item in 0..n {
                    norm_backward_item(upstream.item(item), &xhat[item], &inv_std[item], c, h * w, scale, gs, gsh, dx.item_mut(item));
                }
                dx
            }
            (LayerSpec::LeakyRelu, Cache::Leaky(mask)) => {
                let slope = T::lit(LEAKY_SLOPE);
                let mut dx = upstream;
                dx.data_mut().iter_mut().zip(&mask).for_each(|(v, &pos)| {
                    if !pos {
                        *v *= slope;
                    }
                });
                dx
            }
            _ => unreachable!("cache kind matches layer kind"),
        }
    }

    /// Copy of this network in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_channels: self.input_channels,
            layers: self.layers.clone(),
            params: self.params.iter().map(|v| U::lit(v.as_f64())).collect(),
            grads: vec![U::zero(); self.grads.len()],
            tapes: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4]) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect()).unwrap()
    }

    #[test]
    fn identity_1x1_conv() {
        let mut net = Network::<f64>::zeroed(3, &[LayerSpec::conv(1, 3)]).unwrap();
        let p = net.layer_params_mut(0);
        for c in 0..3 {
            p[c * 3 + c] = 1.0;
        }
        let x = ramp([2, 3, 4, 4]);
        assert_eq!(net.infer(&x).unwrap(), x);
    }

    #[test]
    fn maxpool_on_constant() {
        let net = Network::<f32>::zeroed(2, &[LayerSpec::MaxPool]).unwrap();
        let out = net.infer(&Tensor::filled([1, 2, 8, 6], 1.5)).unwrap();
        assert_eq!(out.shape(), [1, 2, 4, 3]);
        assert!(out.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn maxpool_rejects_odd_dims_naming_layer() {
        let net = Network::<f32>::new(1, &[LayerSpec::conv(3, 2), LayerSpec::MaxPool], 0).unwrap();
        match net.infer(&Tensor::zeros([1, 1, 5, 4])) {
            Err(NnError::Shape { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let net = Network::<f32>::new(3, &[LayerSpec::conv(3, 2)], 0).unwrap();
        assert!(matches!(net.infer(&Tensor::zeros([1, 2, 4, 4])), Err(NnError::Shape { layer: 0, .. })));
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut net = Network::<f32>::new(1, &[LayerSpec::conv(3, 2)], 0).unwrap();
        assert!(matches!(net.backward(&Tensor::zeros([1, 2, 4, 4])), Err(NnError::NoForwardCache)));
        // Eval forwards leave nothing to back-propagate.
        net.forward(&Tensor::zeros([1, 1, 4, 4]), Mode::Eval).unwrap();
        assert!(matches!(net.backward(&Tensor::zeros([1, 2, 4, 4])), Err(NnError::NoForwardCache)));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let specs = [LayerSpec::conv(3, 4), LayerSpec::ChannelNorm, LayerSpec::LeakyRelu, LayerSpec::MaxPool, LayerSpec::conv(1, 2)];
        let mut net = Network::<f64>::new(2, &specs, 3).unwrap();
        let x = ramp([1, 2, 8, 8]);
        let y = net.forward(&x, Mode::Train).unwrap();
        let dx = net.backward(&Tensor::zeros(y.shape())).unwrap();
        assert!(net.grads().iter().all(|&g| g == 0.0));
        assert!(dx.data().iter().all(|&g| g == 0.0));
        assert_eq!(dx.shape(), x.shape());
    }

    #[test]
    fn leaky_backward_scales_negative_side() {
        let mut net = Network::<f64>::zeroed(1, &[LayerSpec::LeakyRelu]).unwrap();
        let x = Tensor::from_vec([1, 1, 1, 2], vec![-2.0, 3.0]).unwrap();
        let y = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.data(), &[-0.2, 3.0]);
        let dx = net.backward(&Tensor::from_vec([1, 1, 1, 2], vec![5.0, 5.0]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[0.5, 5.0]);
    }

    #[test]
    fn downsampling_bookkeeping() {
        let specs = [LayerSpec::conv(3, 2), LayerSpec::MaxPool, LayerSpec::MaxPool, LayerSpec::conv(1, 2), LayerSpec::MaxPool];
        let net = Network::<f32>::new(1, &specs, 1).unwrap();
        assert_eq!(net.downsampling(), 8);
        let y = net.infer(&Tensor::zeros([1, 1, 32, 16])).unwrap();
        assert_eq!((32 / y.h(), 16 / y.w()), (8, 8));
    }

    #[test]
    fn tapes_are_lifo() {
        let mut net = Network::<f64>::new(1, &[LayerSpec::conv(3, 1)], 9).unwrap();
        let a = ramp([1, 1, 4, 4]);
        let b = ramp([1, 1, 4, 4]).scaled(-2.0);
        net.forward(&a, Mode::Train).unwrap();
        net.forward(&b, Mode::Train).unwrap();
        assert_eq!(net.pending_tapes(), 2);
        let up = Tensor::filled([1, 1, 4, 4], 1.0);
        net.backward(&up).unwrap();
        let g_b = net.grads().to_vec();
        net.backward(&up).unwrap();
        assert_eq!(net.pending_tapes(), 0);
        // Linear in the input for the weight part: grads(a) = -grads(b)/2.
        let total = net.grads();
        for i in 0..9 {
            let g_a = total[i] - g_b[i];
            assert!((g_a + g_b[i] / 2.0).abs() < 1e-12);
        }
    }
}
