//! A small fully-convolutional network with exact reverse-mode gradients.
//!
//! Tensors are planar `[channel][row][col]` buffers of `f64`. Convolutions
//! are lowered to matrix products via im2col.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::seed;

pub const LEAKY_SLOPE: f64 = 0.1;

// Inputs are mapped from [0, 255] to [-1, 1] before the first layer.
const INPUT_CENTER: f64 = 127.5;
const INPUT_SCALE: f64 = 127.5;

/// Per-cell output channels before the class logits.
pub const BOX_CHANNELS: usize = 4;
pub const OBJECTNESS_CHANNEL: usize = 4;
pub const HEAD_FIXED_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Normalizes every output channel to zero mean and unit variance over
    /// its spatial extent before the activation.
    pub normalize: bool,
}

impl LayerSpec {
    pub fn plain(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self { out_channels, kernel, stride, normalize: false }
    }

    pub fn normalized(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self { out_channels, kernel, stride, normalize: true }
    }
}

/// Shape of the detector: hidden leaky-ReLU convolutions followed by a
/// linear head that emits `5 + classes` values per grid cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_rows: usize,
    pub input_cols: usize,
    pub input_channels: usize,
    pub hidden: Vec<LayerSpec>,
    pub head_kernel: usize,
    pub classes: usize,
    /// Appends the spatial mean of the last hidden features to every cell
    /// before the head, so each cell sees the whole image.
    pub global_context: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_rows: 96,
            input_cols: 96,
            input_channels: 1,
            hidden: vec![
                LayerSpec::normalized(16, 3, 2),
                LayerSpec::normalized(16, 5, 2),
                LayerSpec::normalized(32, 5, 2),
                LayerSpec::normalized(32, 3, 1),
                LayerSpec::normalized(32, 3, 1),
            ],
            head_kernel: 3,
            classes: 1,
            global_context: true,
        }
    }
}

impl Architecture {
    pub fn total_stride(&self) -> usize {
        self.hidden.iter().map(|l| l.stride).product()
    }

    /// Validates the shape and returns the output grid `(rows, cols)`.
    pub fn grid(&self) -> Result<(usize, usize)> {
        if self.classes == 0 {
            return Err(Error::Parameter("detector needs at least one class".into()));
        }
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::Parameter(format!("input channels must be 1 or 3, got {}", self.input_channels)));
        }
        if self.head_kernel % 2 == 0 || self.hidden.iter().any(|l| l.kernel % 2 == 0 || l.stride == 0 || l.out_channels == 0) {
            return Err(Error::Parameter("kernels must be odd and strides positive".into()));
        }
        let s = self.total_stride();
        if self.input_rows == 0 || self.input_cols == 0 || self.input_rows % s != 0 || self.input_cols % s != 0 {
            return Err(Error::Parameter(format!(
                "input {}x{} is not divisible by the network stride {s}",
                self.input_rows, self.input_cols
            )));
        }
        Ok((self.input_rows / s, self.input_cols / s))
    }

    /// Side length of the square input region that can influence one cell.
    pub fn receptive_field(&self) -> usize {
        if self.global_context {
            return self.input_rows.max(self.input_cols);
        }
        let mut rf = 1;
        let mut jump = 1;
        for l in &self.hidden {
            rf += (l.kernel - 1) * jump;
            jump *= l.stride;
        }
        rf + (self.head_kernel - 1) * jump
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub leaky: bool,
    pub normalize: bool,
    /// `[out][in][kr][kc]`
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Learned weights of the detector together with the shape they realize.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub arch: Architecture,
    pub layers: Vec<ConvLayer>,
    /// Seed the weights were initialized from.
    pub seed: u64,
}

impl DetectorParams {
    /// He-initialized weights. The objectness bias starts strongly negative
    /// so that an untrained detector reports few objects.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.grid()?;
        let mut rng = seed::rng(seed);
        let mut layers = Vec::new();
        let mut in_ch = arch.input_channels;
        let head = LayerSpec::plain(HEAD_FIXED_CHANNELS + arch.classes, arch.head_kernel, 1);
        let n_hidden = arch.hidden.len();
        for (idx, spec) in arch.hidden.iter().chain(std::iter::once(&head)).enumerate() {
            let is_head = idx == n_hidden;
            if is_head && arch.global_context {
                in_ch *= 2;
            }
            let fan_in = (in_ch * spec.kernel * spec.kernel) as f64;
            let gain = if is_head { 1.0 } else { 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) };
            let std = (gain / fan_in).sqrt() * if is_head { 0.1 } else { 1.0 };
            let normal = Normal::new(0.0, std).expect("positive std");
            let weights = (0..spec.out_channels * in_ch * spec.kernel * spec.kernel)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            let mut bias = vec![0.0f32; spec.out_channels];
            if is_head {
                bias[OBJECTNESS_CHANNEL] = -4.0;
            }
            layers.push(ConvLayer {
                in_channels: in_ch,
                out_channels: spec.out_channels,
                kernel: spec.kernel,
                stride: spec.stride,
                leaky: !is_head,
                normalize: spec.normalize && !is_head,
                weights,
                bias,
            });
            in_ch = spec.out_channels;
        }
        Ok(Self { arch, layers, seed })
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn grid(&self) -> (usize, usize) {
        self.arch.grid().expect("validated at construction")
    }

    pub fn cell_stride(&self) -> usize {
        self.arch.total_stride()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Raw head output: `5 + classes` channels over the cell grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    /// `[channel][row][col]`
    pub data: Vec<f64>,
}

impl RawGrid {
    pub fn at(&self, ch: usize, r: usize, c: usize) -> f64 {
        self.data[(ch * self.rows + r) * self.cols + c]
    }

    pub fn zeros_like(&self) -> RawGrid {
        RawGrid { data: vec![0.0; self.data.len()], ..*self }
    }

    pub fn at_mut(&mut self, ch: usize, r: usize, c: usize) -> &mut f64 {
        &mut self.data[(ch * self.rows + r) * self.cols + c]
    }
}

/// Intermediate values kept from a forward pass for the backward pass.
pub(crate) struct Trace {
    // im2col matrix of each layer's input, `[patch_len][out_h * out_w]`
    cols: Vec<Vec<f64>>,
    // pre-activation output of each layer
    pre: Vec<Vec<f64>>,
    // spatial size of each layer's input
    dims: Vec<(usize, usize)>,
    // per-channel inverse standard deviation of normalized layers
    inv_std: Vec<Option<Vec<f64>>>,
}

const NORM_EPS: f64 = 1e-5;

/// Normalizes each `[p]`-long channel of `x` in place, returning `1/σ`.
fn instance_normalize(x: &mut [f64], p: usize) -> Vec<f64> {
    x.chunks_mut(p)
        .map(|ch| {
            let mean = ch.iter().sum::<f64>() / p as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            ch.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv
        })
        .collect()
}

/// Adjoint of [`instance_normalize`] given its output `y`.
fn instance_normalize_backward(delta: &mut [f64], y: &[f64], inv_std: &[f64], p: usize) {
    for ((d, y), &inv) in delta.chunks_mut(p).zip(y.chunks(p)).zip(inv_std) {
        let mean_d = d.iter().sum::<f64>() / p as f64;
        let mean_dy = d.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / p as f64;
        d.iter_mut().zip(y).for_each(|(g, &yv)| *g = inv * (*g - mean_d - yv * mean_dy));
    }
}

fn im2col(input: &[f64], ch: usize, h: usize, w: usize, layer: &ConvLayer, oh: usize, ow: usize) -> Vec<f64> {
    let k = layer.kernel;
    let pad = layer.pad() as isize;
    let s = layer.stride;
    let p = oh * ow;
    let mut col = vec![0.0; layer.patch_len() * p];
    for c in 0..ch {
        for kr in 0..k {
            for kc in 0..k {
                let row = (c * k + kr) * k + kc;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * s) as isize + kr as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &input[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s) as isize + kc as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &[f64], ch: usize, h: usize, w: usize, layer: &ConvLayer, oh: usize, ow: usize) -> Vec<f64> {
    let k = layer.kernel;
    let pad = layer.pad() as isize;
    let s = layer.stride;
    let p = oh * ow;
    let mut out = vec![0.0; ch * h * w];
    for c in 0..ch {
        for kr in 0..k {
            for kc in 0..k {
                let row = (c * k + kr) * k + kc;
                let src = &dcol[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * s) as isize + kr as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * s) as isize + kc as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c (m×n) = a (m×k) · b (k×n)` with explicit strides, overwriting `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, c: &mut [f64], accumulate: bool) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie within the given slices,
    // which callers guarantee by construction of the im2col buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn to_planar(params: &DetectorParams, img: &ImageF) -> Result<Vec<f64>> {
    let a = &params.arch;
    if img.rows() != a.input_rows || img.cols() != a.input_cols || img.channels() != a.input_channels {
        return Err(Error::Dimension(format!(
            "detector expects {}x{}x{}, got {}x{}x{}",
            a.input_rows, a.input_cols, a.input_channels, img.rows(), img.cols(), img.channels()
        )));
    }
    let (h, w, ch) = (img.rows(), img.cols(), img.channels());
    let px = img.pixels();
    let mut out = vec![0.0; px.len()];
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                out[(k * h + r) * w + c] = (px[(r * w + c) * ch + k] - INPUT_CENTER) / INPUT_SCALE;
            }
        }
    }
    Ok(out)
}

/// `[C][P]` → `[2C][P]`, the extra channels holding each channel's mean.
fn append_context(act: &mut Vec<f64>, p: usize) {
    let means: Vec<f64> = act.chunks(p).map(|ch| ch.iter().sum::<f64>() / p as f64).collect();
    for m in means {
        act.extend(std::iter::repeat_n(m, p));
    }
}

/// Adjoint of [`append_context`].
fn fold_context(delta: &mut Vec<f64>, p: usize) {
    let c = delta.len() / (2 * p);
    let (own, ctx) = delta.split_at_mut(c * p);
    for (dst, src) in own.chunks_mut(p).zip(ctx.chunks(p)) {
        let share = src.iter().sum::<f64>() / p as f64;
        dst.iter_mut().for_each(|d| *d += share);
    }
    delta.truncate(c * p);
}

pub(crate) fn forward_traced(params: &DetectorParams, img: &ImageF) -> Result<(RawGrid, Trace)> {
    let mut act = to_planar(params, img)?;
    let (mut h, mut w) = (img.rows(), img.cols());
    let mut trace = Trace { cols: Vec::new(), pre: Vec::new(), dims: Vec::new(), inv_std: Vec::new() };
    let head_index = params.layers.len() - 1;
    for (li, layer) in params.layers.iter().enumerate() {
        if li == head_index && params.arch.global_context {
            append_context(&mut act, h * w);
        }
        let (oh, ow) = (layer.out_dim(h), layer.out_dim(w));
        let col = im2col(&act, layer.in_channels, h, w, layer, oh, ow);
        let p = oh * ow;
        let kdim = layer.patch_len();
        let wts: Vec<f64> = layer.weights.iter().map(|&v| f64::from(v)).collect();
        let mut pre = vec![0.0; layer.out_channels * p];
        for (o, chunk) in pre.chunks_mut(p).enumerate() {
            chunk.fill(f64::from(layer.bias[o]));
        }
        gemm(layer.out_channels, kdim, p, &wts, kdim, 1, &col, p, 1, &mut pre, true);
        let inv_std = layer.normalize.then(|| instance_normalize(&mut pre, p));
        act = if layer.leaky {
            pre.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect()
        } else {
            pre.clone()
        };
        trace.cols.push(col);
        trace.pre.push(pre);
        trace.dims.push((h, w));
        trace.inv_std.push(inv_std);
        h = oh;
        w = ow;
    }
    let channels = params.layers.last().map_or(0, |l| l.out_channels);
    Ok((RawGrid { rows: h, cols: w, channels, data: act }, trace))
}

/// Runs the network on one image.
pub fn forward(params: &DetectorParams, img: &ImageF) -> Result<RawGrid> {
    forward_traced(params, img).map(|(g, _)| g)
}

/// Gradients of a scalar with respect to every weight and bias, laid out
/// like [`DetectorParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros(params: &DetectorParams) -> Self {
        Self {
            weights: params.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: params.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Back-propagates `d_out` (gradient w.r.t. the raw head output).
///
/// Returns the gradient w.r.t. the input image on the intensity scale, laid
/// out like the image, and the parameter gradients when requested.
pub(crate) fn backward(
    params: &DetectorParams,
    img: &ImageF,
    trace: &Trace,
    d_out: &RawGrid,
    want_params: bool,
    want_input: bool,
) -> (Option<ImageF>, Option<ParamGrads>) {
    let mut grads = want_params.then(|| ParamGrads::zeros(params));
    let mut delta = d_out.data.clone();
    for (li, layer) in params.layers.iter().enumerate().rev() {
        let pre = &trace.pre[li];
        let (h, w) = trace.dims[li];
        let (oh, ow) = (layer.out_dim(h), layer.out_dim(w));
        let p = oh * ow;
        if layer.leaky {
            for (d, &z) in delta.iter_mut().zip(pre) {
                if z <= 0.0 {
                    *d *= LEAKY_SLOPE;
                }
            }
        }
        if let Some(inv_std) = &trace.inv_std[li] {
            instance_normalize_backward(&mut delta, pre, inv_std, p);
        }
        let kdim = layer.patch_len();
        if let Some(g) = grads.as_mut() {
            // dW = delta (O×P) · colᵀ (P×K)
            gemm(layer.out_channels, p, kdim, &delta, p, 1, &trace.cols[li], 1, p, &mut g.weights[li], false);
            for (o, b) in g.bias[li].iter_mut().enumerate() {
                *b = delta[o * p..(o + 1) * p].iter().sum();
            }
        }
        if li == 0 && !want_input {
            break;
        }
        // dcol = Wᵀ (K×O) · delta (O×P)
        let wts: Vec<f64> = layer.weights.iter().map(|&v| f64::from(v)).collect();
        let mut dcol = vec![0.0; kdim * p];
        gemm(kdim, layer.out_channels, p, &wts, 1, kdim, &delta, p, 1, &mut dcol, false);
        delta = col2im(&dcol, layer.in_channels, h, w, layer, oh, ow);
        if li == params.layers.len() - 1 && params.arch.global_context {
            fold_context(&mut delta, h * w);
        }
    }
    let input_grad = want_input.then(|| {
        let (h, w, ch) = (img.rows(), img.cols(), img.channels());
        let mut px = vec![0.0; h * w * ch];
        for r in 0..h {
            for c in 0..w {
                for k in 0..ch {
                    px[(r * w + c) * ch + k] = delta[(k * h + r) * w + c] / INPUT_SCALE;
                }
            }
        }
        ImageF::new(h, w, ch, px).expect("finite gradient")
    });
    (input_grad, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Architecture {
        Architecture {
            input_rows: 16,
            input_cols: 16,
            input_channels: 1,
            hidden: vec![
                LayerSpec::plain(3, 3, 2),
                LayerSpec::plain(4, 3, 2),
            ],
            head_kernel: 1,
            global_context: false,
            classes: 2,
        }
    }

    #[test]
    fn default_grid_is_12x12() {
        let arch = Architecture::default();
        assert_eq!(arch.grid().unwrap(), (12, 12));
        assert_eq!(arch.total_stride(), 8);
    }

    #[test]
    fn receptive_field_of_plain_stack() {
        let arch = Architecture {
            hidden: vec![LayerSpec::plain(8, 3, 2); 3],
            head_kernel: 1,
            global_context: false,
            ..Architecture::default()
        };
        assert_eq!(arch.receptive_field(), 15);
    }

    #[test]
    fn indivisible_input_rejected() {
        let arch = Architecture { input_rows: 18, ..small_arch() };
        assert!(DetectorParams::init(arch, 0).is_err());
    }

    #[test]
    fn output_shape_and_determinism() {
        let params = DetectorParams::init(small_arch(), 3).unwrap();
        let img = ImageF::filled(16, 16, 1, 90.0);
        let a = forward(&params, &img).unwrap();
        let b = forward(&params, &img).unwrap();
        assert_eq!((a.rows, a.cols, a.channels), (4, 4, 7));
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn wrong_input_size_is_dimension_error() {
        let params = DetectorParams::init(small_arch(), 3).unwrap();
        let img = ImageF::filled(8, 16, 1, 0.0);
        assert!(matches!(forward(&params, &img), Err(Error::Dimension(_))));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let layer = ConvLayer {
            in_channels: 2,
            out_channels: 1,
            kernel: 3,
            stride: 2,
            leaky: true,
            normalize: false,
            weights: vec![0.0; 18],
            bias: vec![0.0],
        };
        let (h, w) = (7, 6);
        let (oh, ow) = (layer.out_dim(h), layer.out_dim(w));
        let x: Vec<f64> = (0..2 * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..18 * oh * ow).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let cx = im2col(&x, 2, h, w, &layer, oh, ow);
        let ty = col2im(&y, 2, h, w, &layer, oh, ow);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
