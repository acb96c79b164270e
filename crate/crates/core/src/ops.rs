//! Forward and backward kernels for the dense operations the fusion nets
//! are built from. Everything here is a pure function of its inputs.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{config_err, Error, Result};
use crate::tensor::{FeatureMap, Tensor};

/// Parameters of a square 2-D convolution with kernel size 1 or 3.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out x in x k x k`, row-major.
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl ConvParams {
    pub fn new(
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        check_kernel(kernel_size)?;
        let n = out_channels * in_channels * kernel_size * kernel_size;
        if weights.len() != n {
            return Err(config_err(format!("conv weights need {n} values, got {}", weights.len())));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(config_err(format!(
                    "conv bias needs {out_channels} values, got {}",
                    b.len()
                )));
            }
        }
        Ok(Self { kernel_size, in_channels, out_channels, weights, bias })
    }

    pub fn zeros(kernel_size: usize, in_channels: usize, out_channels: usize, bias: bool) -> Self {
        Self {
            kernel_size,
            in_channels,
            out_channels,
            weights: vec![0.0; out_channels * in_channels * kernel_size * kernel_size],
            bias: bias.then(|| vec![0.0; out_channels]),
        }
    }

    /// Zero-mean uniform init with bound `sqrt(3 / fan_in)`; biases start at zero.
    pub fn init_uniform<R: Rng>(
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel_size * kernel_size).max(1) as f32;
        let bound = (3.0 / fan_in).sqrt();
        let mut p = Self::zeros(kernel_size, in_channels, out_channels, bias);
        for w in &mut p.weights {
            *w = rng.gen_range(-bound..bound);
        }
        p
    }

    /// Pass-through convolution: channel `i` of the output copies channel `i`
    /// of the input (through the kernel centre). Requires `in == out`.
    pub fn identity(kernel_size: usize, channels: usize) -> Self {
        let mut p = Self::zeros(kernel_size, channels, channels, true);
        let kk = kernel_size * kernel_size;
        let centre = kk / 2;
        for c in 0..channels {
            p.weights[(c * channels + c) * kk + centre] = 1.0;
        }
        p
    }

    pub fn padding(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        let k = self.kernel_size;
        self.weights[((o * self.in_channels + i) * k + ky) * k + kx]
    }

    pub fn weight_tensor(&self) -> Tensor {
        let k = self.kernel_size;
        Tensor {
            shape: vec![self.out_channels, self.in_channels, k, k],
            data: self.weights.clone(),
        }
    }

    pub fn bias_tensor(&self) -> Option<Tensor> {
        self.bias
            .as_ref()
            .map(|b| Tensor { shape: vec![self.out_channels], data: b.clone() })
    }
}

fn check_kernel(k: usize) -> Result<()> {
    if k == 1 || k == 3 {
        Ok(())
    } else {
        Err(Error::Unsupported(format!("kernel size {k} (only 1 and 3 are implemented)")))
    }
}

fn check_conv(input: &FeatureMap, params: &ConvParams, padding: usize) -> Result<()> {
    check_kernel(params.kernel_size)?;
    if params.in_channels != input.channels() {
        return Err(config_err(format!(
            "conv expects {} input channels, got {}",
            params.in_channels,
            input.channels()
        )));
    }
    if padding != params.padding() {
        return Err(config_err(format!(
            "padding {padding} does not preserve spatial dims for kernel {}",
            params.kernel_size
        )));
    }
    Ok(())
}

/// Valid output range along one axis for kernel tap `t` with padding `p`.
#[inline]
fn tap_range(t: usize, p: usize, n: usize) -> (usize, usize) {
    // output o reads input o + t - p, which must lie in [0, n)
    let lo = p.saturating_sub(t);
    let hi = (n + p).saturating_sub(t).min(n);
    (lo, hi.max(lo))
}

/// Zero-padded cross-correlation with stride 1.
pub fn conv2d(input: &FeatureMap, params: &ConvParams, padding: usize) -> Result<FeatureMap> {
    check_conv(input, params, padding)?;
    let (_, h, w) = input.dims();
    let plane = h * w;
    let k = params.kernel_size;
    let mut out = vec![0.0f32; params.out_channels * plane];
    out.par_chunks_mut(plane.max(1)).enumerate().for_each(|(o, dst)| {
        if let Some(b) = &params.bias {
            dst.fill(b[o]);
        }
        for i in 0..params.in_channels {
            let src = input.channel(i);
            for ky in 0..k {
                let (y0, y1) = tap_range(ky, padding, h);
                for kx in 0..k {
                    let wv = params.w(o, i, ky, kx);
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = tap_range(kx, padding, w);
                    for y in y0..y1 {
                        let sy = y + ky - padding;
                        let drow = &mut dst[y * w + x0..y * w + x1];
                        let srow = &src[sy * w + x0 + kx - padding..sy * w + x1 + kx - padding];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    });
    FeatureMap::from_vec(params.out_channels, h, w, out)
}

/// Gradients of a convolution: `(d_input, d_weights, d_bias)`.
pub fn conv2d_backward(
    input: &FeatureMap,
    params: &ConvParams,
    padding: usize,
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, Vec<f32>, Option<Vec<f32>>)> {
    check_conv(input, params, padding)?;
    let (cin, h, w) = input.dims();
    let plane = h * w;
    let k = params.kernel_size;
    let cout = params.out_channels;
    if grad_out.dims() != (cout, h, w) {
        return Err(config_err("conv gradient has the wrong shape"));
    }

    let mut d_in = vec![0.0f32; cin * plane];
    d_in.par_chunks_mut(plane.max(1)).enumerate().for_each(|(i, dst)| {
        for o in 0..cout {
            let g = grad_out.channel(o);
            for ky in 0..k {
                let (y0, y1) = tap_range(ky, padding, h);
                for kx in 0..k {
                    let wv = params.w(o, i, ky, kx);
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = tap_range(kx, padding, w);
                    for y in y0..y1 {
                        let sy = y + ky - padding;
                        let grow = &g[y * w + x0..y * w + x1];
                        let drow = &mut dst[sy * w + x0 + kx - padding..sy * w + x1 + kx - padding];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
    });

    let kk = k * k;
    let mut d_w = vec![0.0f32; cout * cin * kk];
    d_w.par_chunks_mut((cin * kk).max(1)).enumerate().for_each(|(o, dst)| {
        let g = grad_out.channel(o);
        for i in 0..cin {
            let src = input.channel(i);
            for ky in 0..k {
                let (y0, y1) = tap_range(ky, padding, h);
                for kx in 0..k {
                    let (x0, x1) = tap_range(kx, padding, w);
                    let mut acc = 0.0f32;
                    for y in y0..y1 {
                        let sy = y + ky - padding;
                        let grow = &g[y * w + x0..y * w + x1];
                        let srow = &src[sy * w + x0 + kx - padding..sy * w + x1 + kx - padding];
                        for (gv, s) in grow.iter().zip(srow) {
                            acc += gv * s;
                        }
                    }
                    dst[(i * k + ky) * k + kx] = acc;
                }
            }
        }
    });

    let d_b = params
        .bias
        .as_ref()
        .map(|_| (0..cout).map(|o| grad_out.channel(o).iter().sum()).collect());

    Ok((FeatureMap::from_vec(cin, h, w, d_in)?, d_w, d_b))
}

pub fn relu(input: &FeatureMap) -> FeatureMap {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &FeatureMap, grad_out: &FeatureMap) -> FeatureMap {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    FeatureMap::from_vec(input.channels(), input.height(), input.width(), data)
        .expect("relu gradient keeps the input shape")
}

/// Stabilized softmax over the entries where `mask` is true; masked entries
/// are exactly zero.
pub fn softmax_masked(values: &[f32], mask: &[bool]) -> Result<Vec<f32>> {
    if values.len() != mask.len() {
        return Err(Error::InvalidInput(format!(
            "softmax values ({}) and mask ({}) differ in length",
            values.len(),
            mask.len()
        )));
    }
    let mut out = vec![0.0; values.len()];
    if !softmax_masked_into(values, mask, 1.0, &mut out) {
        return Err(Error::InvalidInput("softmax mask has no valid entry".into()));
    }
    Ok(out)
}

/// In-place kernel behind [`softmax_masked`]; `scale` multiplies the values
/// before exponentiation. Returns false when no entry is valid.
#[inline]
pub(crate) fn softmax_masked_into(values: &[f32], mask: &[bool], scale: f32, out: &mut [f32]) -> bool {
    let mut max = f32::NEG_INFINITY;
    for (&v, &m) in values.iter().zip(mask) {
        if m && v * scale > max {
            max = v * scale;
        }
    }
    if max == f32::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0f64;
    for ((o, &v), &m) in out.iter_mut().zip(values).zip(mask) {
        if m {
            let e = (v * scale - max).exp();
            *o = e;
            sum += e as f64;
        } else {
            *o = 0.0;
        }
    }
    let inv = (1.0 / sum) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
    true
}

/// Vector-Jacobian product of the masked softmax, given its output `y`.
/// `scale` is the pre-exponent multiplier used in the forward pass.
#[inline]
pub(crate) fn softmax_masked_backward_into(y: &[f32], grad_out: &[f32], scale: f32, out: &mut [f32]) {
    let dot: f32 = y.iter().zip(grad_out).map(|(a, b)| a * b).sum();
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(grad_out) {
        *o = scale * yi * (gi - dot);
    }
}

pub fn softmax_masked_backward(y: &[f32], grad_out: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; y.len()];
    softmax_masked_backward_into(y, grad_out, 1.0, &mut out);
    out
}

/// Softmax across channels at every spatial location.
pub fn channel_softmax(x: &FeatureMap) -> FeatureMap {
    let (c, h, w) = x.dims();
    let p = h * w;
    let d = x.data();
    let mut out = vec![0.0f32; c * p];
    for i in 0..p {
        let mx = (0..c).map(|ch| d[ch * p + i]).fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for ch in 0..c {
            let e = (d[ch * p + i] - mx).exp();
            out[ch * p + i] = e;
            sum += e as f64;
        }
        let inv = (1.0 / sum) as f32;
        for ch in 0..c {
            out[ch * p + i] *= inv;
        }
    }
    FeatureMap::from_vec(c, h, w, out).expect("softmax keeps the shape")
}

pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(config_err(format!(
            "cannot concat {}x{} with {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    FeatureMap::from_vec(a.channels() + b.channels(), a.height(), a.width(), data)
}

/// Splits a gradient of a concatenation at channel `a_channels`.
pub fn concat_channels_backward(a_channels: usize, grad_out: &FeatureMap) -> (FeatureMap, FeatureMap) {
    let (c, h, w) = grad_out.dims();
    let split = a_channels * h * w;
    let (ga, gb) = grad_out.data().split_at(split);
    (
        FeatureMap::from_vec(a_channels, h, w, ga.to_vec()).expect("split shape"),
        FeatureMap::from_vec(c - a_channels, h, w, gb.to_vec()).expect("split shape"),
    )
}
