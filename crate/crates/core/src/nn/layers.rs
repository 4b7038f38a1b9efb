//! Per-layer kernels. Each forward returns an optional cache that the
//! matching backward consumes.

use serde::{Deserialize, Serialize};

use crate::scalar::{matmul, MatRef, Scalar};

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.1;
/// Variance floor inside channel normalization.
pub const NORM_EPS: f64 = 1e-5;

/// One layer of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Stride-1 same-padded convolution, kernel 1 or 3.
    Conv { kernel: usize, out_channels: usize, bias: bool },
    /// 2x2 max-pool, stride 2.
    MaxPool,
    /// Per-sample, per-channel spatial normalization with learnable scale/shift.
    ChannelNorm,
    /// Leaky ReLU with slope 0.1.
    LeakyRelu,
}

impl LayerSpec {
    pub fn conv(kernel: usize, out_channels: usize) -> Self {
        LayerSpec::Conv { kernel, out_channels, bias: true }
    }

    pub fn conv_no_bias(kernel: usize, out_channels: usize) -> Self {
        LayerSpec::Conv { kernel, out_channels, bias: false }
    }

    pub fn output_channels(&self, input: usize) -> usize {
        match *self {
            LayerSpec::Conv { out_channels, .. } => out_channels,
            _ => input,
        }
    }

    pub fn param_count(&self, input: usize) -> usize {
        match *self {
            LayerSpec::Conv { kernel, out_channels, bias } => {
                out_channels * input * kernel * kernel + if bias { out_channels } else { 0 }
            }
            LayerSpec::ChannelNorm => 2 * input,
            _ => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::ChannelNorm => "channelnorm",
            LayerSpec::LeakyRelu => "leaky_relu",
        }
    }
}

/// Unroll 3x3 same-padded patches: `cols[(c*9 + ky*3 + kx), y*w + x]`.
pub(crate) fn im2col3<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                let oy = ky as isize - 1;
                let ox = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + oy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match ox {
                        -1 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        0 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatter-add columns back onto the input grid.
pub(crate) fn col2im3<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                let oy = ky as isize - 1;
                let ox = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match ox {
                        -1 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        0 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvGeom {
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

/// Convolve one batch item. Returns the unrolled columns for 3x3 kernels.
pub(crate) fn conv_forward_item<T: Scalar>(
    g: &ConvGeom,
    weights: &[T],
    bias: Option<&[T]>,
    input: &[T],
    out: &mut [T],
    keep_cols: bool,
) -> Option<Vec<T>> {
    let hw = g.h * g.w;
    let wmat = MatRef::new(weights, g.cout, g.patch());
    let cols = if g.kernel == 3 {
        let mut cols = vec![T::zero(); g.patch() * hw];
        im2col3(input, g.cin, g.h, g.w, &mut cols);
        matmul(wmat, MatRef::new(&cols, g.patch(), hw), out, false);
        Some(cols)
    } else {
        matmul(wmat, MatRef::new(input, g.cin, hw), out, false);
        None
    };
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bv);
        }
    }
    if keep_cols {
        cols
    } else {
        None
    }
}

/// Accumulate weight/bias gradients and write the input gradient for one item.
pub(crate) fn conv_backward_item<T: Scalar>(
    g: &ConvGeom,
    weights: &[T],
    cols_or_input: &[T],
    upstream: &[T],
    grad_w: &mut [T],
    grad_b: Option<&mut [T]>,
    grad_in: &mut [T],
) {
    let hw = g.h * g.w;
    let dout = MatRef::new(upstream, g.cout, hw);
    // dW += dOut * cols^T
    matmul(dout, MatRef::new(cols_or_input, g.patch(), hw).t(), grad_w, true);
    if let Some(gb) = grad_b {
        for (o, b) in gb.iter_mut().enumerate() {
            *b += upstream[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
    }
    let wt = MatRef::new(weights, g.cout, g.patch()).t();
    if g.kernel == 3 {
        let mut dcols = vec![T::zero(); g.patch() * hw];
        matmul(wt, dout, &mut dcols, false);
        grad_in.iter_mut().for_each(|v| *v = T::zero());
        col2im3(&dcols, g.cin, g.h, g.w, grad_in);
    } else {
        matmul(wt, dout, grad_in, false);
    }
}

/// 2x2/2 max-pool of one `c x h x w` item. Returns flat argmax indices.
pub(crate) fn maxpool_forward_item<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [T],
) -> Vec<u32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = ch * h * w + 2 * oy * w + 2 * ox;
                let mut best = input[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[i] > best {
                        best = input[i];
                        best_i = i;
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    arg
}

/// Normalize each channel of one item over its spatial extent.
/// Returns `(xhat, inv_std)`.
pub(crate) fn norm_forward_item<T: Scalar>(
    input: &[T],
    c: usize,
    hw: usize,
    scale: &[T],
    shift: &[T],
    out: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); c * hw];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let x = &input[ch * hw..(ch + 1) * hw];
        let mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
        let var = x.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / hw as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[ch] = T::lit(inv);
        let (mean_t, inv_t) = (T::lit(mean), T::lit(inv));
        for i in 0..hw {
            let xh = (x[i] - mean_t) * inv_t;
            xhat[ch * hw + i] = xh;
            out[ch * hw + i] = scale[ch] * xh + shift[ch];
        }
    }
    (xhat, inv_std)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_backward_item<T: Scalar>(
    upstream: &[T],
    xhat: &[T],
    inv_std: &[T],
    c: usize,
    hw: usize,
    scale: &[T],
    grad_scale: &mut [T],
    grad_shift: &mut [T],
    grad_in: &mut [T],
) {
    let m = hw as f64;
    for ch in 0..c {
        let dy = &upstream[ch * hw..(ch + 1) * hw];
        let xh = &xhat[ch * hw..(ch + 1) * hw];
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for i in 0..hw {
            sum_dy += dy[i].as_f64();
            sum_dy_xh += (dy[i] * xh[i]).as_f64();
        }
        grad_scale[ch] += T::lit(sum_dy_xh);
        grad_shift[ch] += T::lit(sum_dy);
        // dx = g * inv / M * (M dy - sum dy - xhat * sum(dy xhat))
        let g = scale[ch].as_f64();
        let k = g * inv_std[ch].as_f64() / m;
        let (a, b) = (T::lit(sum_dy), T::lit(sum_dy_xh));
        let (mt, kt) = (T::lit(m), T::lit(k));
        for i in 0..hw {
            grad_in[ch * hw + i] = kt * (mt * dy[i] - a - xh[i] * b);
        }
    }
}
