//! Trainable layer primitives with explicit forward/backward passes.
//!
//! Every layer owns its parameters and matching gradient buffers inside
//! [`Param`]. `forward` returns the output plus a cache of whatever the
//! backward pass needs; `backward` consumes one cache, accumulates into the
//! gradient buffers (`+=`, so two-view passes just call it twice) and returns
//! the gradient w.r.t. the layer input.
//!
//! Feature maps are `(H, W, C)` with channels contiguous, so a map reshapes
//! to an `(H*W, C)` matrix for free; the 1x1 and non-overlapping patch
//! convolutions below are plain matrix products on that view.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, Axis, Ix1};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{FeatureMap, FeatureVector};

/// A parameter tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Contiguous view of the values (all params are standard layout).
    pub fn values(&self) -> &[f64] {
        self.value.as_slice().expect("params are standard layout")
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.value.as_slice_mut().expect("params are standard layout")
    }

    pub fn grads(&self) -> &[f64] {
        self.grad.as_slice().expect("params are standard layout")
    }
}

/// Truncated-normal init: N(0, std^2) with draws beyond two standard
/// deviations rejected.
pub fn trunc_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<f64> {
    let normal = Normal::new(0.0, std).expect("std > 0");
    ArrayD::from_shape_simple_fn(shape.to_vec(), || loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    })
}

const INIT_STD: f64 = 0.02;

fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(shape.to_vec())
}

fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(shape.to_vec(), 1.0)
}

/// Reinterpret an `(H, W, C)` map as an `(H*W, C)` matrix view.
fn as_matrix(map: &FeatureMap) -> ArrayView2<'_, f64> {
    let (h, w, c) = map.dim();
    map.view()
        .into_shape_with_order((h * w, c))
        .expect("maps are standard layout")
}

// ---------------------------------------------------------------------------
// Layer normalization (over the channel axis)
// ---------------------------------------------------------------------------

pub const LN_EPS: f64 = 1e-6;

/// Per-position layer normalization over channels, with learned scale/bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub scale: Param,
    pub bias: Param,
}

pub struct LayerNormCache {
    /// Normalized activations, flattened to (positions, channels).
    xhat: Array2<f64>,
    /// 1/std per position.
    rstd: Array1<f64>,
    map_dim: Option<(usize, usize, usize)>,
}

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Param::new(ones(&[channels])),
            bias: Param::new(zeros(&[channels])),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    fn normalize(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let (n, c) = x.dim();
        let scale = self.scale.value.as_slice().unwrap();
        let bias = self.bias.value.as_slice().unwrap();
        let mut xhat = Array2::zeros((n, c));
        let mut out = Array2::zeros((n, c));
        let mut rstd = Array1::zeros(n);
        let xh_s = xhat.as_slice_mut().unwrap();
        let out_s = out.as_slice_mut().unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            let xh_row = &mut xh_s[i * c..(i + 1) * c];
            let out_row = &mut out_s[i * c..(i + 1) * c];
            for j in 0..c {
                let xh = (row[j] - mean) * r;
                xh_row[j] = xh;
                out_row[j] = xh * scale[j] + bias[j];
            }
        }
        (out, xhat, rstd)
    }

    fn backward_rows(&mut self, cache: &LayerNormCache, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        let (n, cols) = dy.dim();
        let c = cols as f64;
        let mut dx = Array2::zeros((n, cols));
        {
            let dx_s = dx.as_slice_mut().unwrap();
            let scale = self.scale.value.as_slice().unwrap();
            let dscale = self.scale.grad.as_slice_mut().unwrap();
            let dbias = self.bias.grad.as_slice_mut().unwrap();
            let xh_all = cache.xhat.as_slice().unwrap();
            for (i, dyr) in dy.rows().into_iter().enumerate() {
                let xh = &xh_all[i * cols..(i + 1) * cols];
                // dxhat = dy * scale; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                let mut mean_dxh = 0.0;
                let mut mean_dxh_xh = 0.0;
                for j in 0..cols {
                    let dxh = dyr[j] * scale[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[j];
                    dscale[j] += dyr[j] * xh[j];
                    dbias[j] += dyr[j];
                }
                mean_dxh /= c;
                mean_dxh_xh /= c;
                let dx_row = &mut dx_s[i * cols..(i + 1) * cols];
                let r = cache.rstd[i];
                for j in 0..cols {
                    let dxh = dyr[j] * scale[j];
                    dx_row[j] = r * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                }
            }
        }
        dx
    }

    pub fn forward_map(&self, x: &FeatureMap) -> (FeatureMap, LayerNormCache) {
        let dim = x.dim();
        let (out, xhat, rstd) = self.normalize(as_matrix(x));
        let out = out.into_shape_with_order(dim).unwrap();
        (out, LayerNormCache { xhat, rstd, map_dim: Some(dim) })
    }

    pub fn backward_map(&mut self, cache: &LayerNormCache, dy: &FeatureMap) -> FeatureMap {
        let dim = cache.map_dim.expect("cache comes from forward_map");
        let dx = self.backward_rows(cache, as_matrix(dy));
        dx.into_shape_with_order(dim).unwrap()
    }

    pub fn forward_vec(&self, x: &FeatureVector) -> (FeatureVector, LayerNormCache) {
        let row = x.view().into_shape_with_order((1, x.len())).unwrap();
        let (out, xhat, rstd) = self.normalize(row);
        (
            out.into_shape_with_order(x.len()).unwrap(),
            LayerNormCache { xhat, rstd, map_dim: None },
        )
    }

    pub fn backward_vec(&mut self, cache: &LayerNormCache, dy: &FeatureVector) -> FeatureVector {
        let row = dy.view().into_shape_with_order((1, dy.len())).unwrap();
        let dx = self.backward_rows(cache, row);
        dx.into_shape_with_order(dy.len()).unwrap()
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(format!("{prefix}.scale"), &self.scale);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.scale"), &mut self.scale);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Non-overlapping patch convolution (stem, downsampling)
// ---------------------------------------------------------------------------

/// KxK convolution with stride K: each output position sees exactly one
/// input patch, so the whole layer is one matrix product against the
/// flattened patches.
#[derive(Debug, Clone)]
pub struct PatchConv {
    pub weight: Param, // (K*K*C_in, C_out)
    pub bias: Param,   // (C_out,)
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

pub struct PatchConvCache {
    patches: Array2<f64>, // (out_positions, K*K*C_in)
    out_dim: (usize, usize, usize),
}

impl PatchConv {
    pub fn new<R: Rng>(kernel: usize, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(trunc_normal(&[kernel * kernel * c_in, c_out], INIT_STD, rng)),
            bias: Param::new(zeros(&[c_out])),
            kernel,
            c_in,
            c_out,
        }
    }

    fn gather_patches(&self, x: &FeatureMap) -> Array2<f64> {
        let k = self.kernel;
        let (h, w, c) = x.dim();
        let (oh, ow) = (h / k, w / k);
        let mut patches = Array2::zeros((oh * ow, k * k * c));
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                let mut col = 0;
                for ky in 0..k {
                    for kx in 0..k {
                        for ch in 0..c {
                            patches[[row, col]] = x[[oy * k + ky, ox * k + kx, ch]];
                            col += 1;
                        }
                    }
                }
            }
        }
        patches
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, PatchConvCache) {
        let k = self.kernel;
        let (h, w, c) = x.dim();
        assert_eq!(c, self.c_in, "channel mismatch");
        assert!(h % k == 0 && w % k == 0, "spatial dims not divisible by {k}");
        let patches = self.gather_patches(x);
        let weight = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = patches.dot(&weight);
        out += &bias;
        let out_dim = (h / k, w / k, self.c_out);
        let out = out.into_shape_with_order(out_dim).unwrap();
        (out, PatchConvCache { patches, out_dim })
    }

    pub fn backward(&mut self, cache: &PatchConvCache, dy: &FeatureMap) -> FeatureMap {
        let k = self.kernel;
        let (oh, ow, _) = cache.out_dim;
        let dy_m = as_matrix(dy);
        let weight = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        {
            let mut dw = self.weight.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            dw += &cache.patches.t().dot(&dy_m);
            let mut db = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            db += &dy_m.sum_axis(Axis(0));
        }
        let dpatches = dy_m.dot(&weight.t());
        // Scatter patch gradients back to the input grid.
        let mut dx = Array3::zeros((oh * k, ow * k, self.c_in));
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                let mut col = 0;
                for ky in 0..k {
                    for kx in 0..k {
                        for ch in 0..self.c_in {
                            dx[[oy * k + ky, ox * k + kx, ch]] = dpatches[[row, col]];
                            col += 1;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Non-overlapping transposed patch convolution (upsampling, reconstruction)
// ---------------------------------------------------------------------------

/// KxK transposed convolution with stride K: each input position emits one
/// independent KxK output patch.
#[derive(Debug, Clone)]
pub struct PatchDeconv {
    pub weight: Param, // (C_in, K*K*C_out)
    pub bias: Param,   // (C_out,)
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

pub struct PatchDeconvCache {
    input: Array2<f64>, // (positions, C_in)
    in_dim: (usize, usize, usize),
}

impl PatchDeconv {
    pub fn new<R: Rng>(kernel: usize, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(trunc_normal(&[c_in, kernel * kernel * c_out], INIT_STD, rng)),
            bias: Param::new(zeros(&[c_out])),
            kernel,
            c_in,
            c_out,
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, PatchDeconvCache) {
        let k = self.kernel;
        let (h, w, c) = x.dim();
        assert_eq!(c, self.c_in, "channel mismatch");
        let input = as_matrix(x).to_owned();
        let weight = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let patches = input.dot(&weight); // (H*W, K*K*C_out)
        let mut out = Array3::zeros((h * k, w * k, self.c_out));
        for iy in 0..h {
            for ix in 0..w {
                let row = iy * w + ix;
                let mut col = 0;
                for ky in 0..k {
                    for kx in 0..k {
                        for ch in 0..self.c_out {
                            out[[iy * k + ky, ix * k + kx, ch]] = patches[[row, col]] + bias[ch];
                            col += 1;
                        }
                    }
                }
            }
        }
        (out, PatchDeconvCache { input, in_dim: (h, w, c) })
    }

    pub fn backward(&mut self, cache: &PatchDeconvCache, dy: &FeatureMap) -> FeatureMap {
        let k = self.kernel;
        let (h, w, _) = cache.in_dim;
        // Gather output-patch gradients into (H*W, K*K*C_out).
        let mut dpatches = Array2::zeros((h * w, k * k * self.c_out));
        {
            let mut db = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            for iy in 0..h {
                for ix in 0..w {
                    let row = iy * w + ix;
                    let mut col = 0;
                    for ky in 0..k {
                        for kx in 0..k {
                            for ch in 0..self.c_out {
                                let g = dy[[iy * k + ky, ix * k + kx, ch]];
                                dpatches[[row, col]] = g;
                                db[ch] += g;
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        let weight = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        {
            let mut dw = self.weight.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            dw += &cache.input.t().dot(&dpatches);
        }
        let dx = dpatches.dot(&weight.t());
        dx.into_shape_with_order(cache.in_dim).unwrap()
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Depthwise convolution
// ---------------------------------------------------------------------------

/// KxK depthwise convolution, stride 1, zero padding K/2 (shape-preserving).
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    pub weight: Param, // (K, K, C)
    pub bias: Param,   // (C,)
    pub kernel: usize,
}

pub struct DepthwiseConvCache {
    input: FeatureMap,
}

impl DepthwiseConv {
    pub fn new<R: Rng>(kernel: usize, channels: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        Self {
            weight: Param::new(trunc_normal(&[kernel, kernel, channels], INIT_STD, rng)),
            bias: Param::new(zeros(&[channels])),
            kernel,
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, DepthwiseConvCache) {
        let k = self.kernel;
        let pad = k / 2;
        let (h, w, c) = x.dim();
        // Channel rows are contiguous in HWC layout; working on slices keeps
        // the inner loop free of per-element stride arithmetic.
        let x_std = x.as_standard_layout();
        let xs = x_std.as_slice().unwrap();
        let ws = self.weight.value.as_slice().unwrap();
        let bias = self.bias.value.as_slice().unwrap();
        let mut out = Array3::zeros((h, w, c));
        {
            let os = out.as_slice_mut().unwrap();
            for oy in 0..h {
                for ox in 0..w {
                    let o_base = (oy * w + ox) * c;
                    for ky in 0..k {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        for kx in 0..k {
                            let ix = ox + kx;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            let ix = ix - pad;
                            let w_row = &ws[(ky * k + kx) * c..][..c];
                            let x_row = &xs[(iy * w + ix) * c..][..c];
                            let o_row = &mut os[o_base..o_base + c];
                            for ch in 0..c {
                                o_row[ch] += w_row[ch] * x_row[ch];
                            }
                        }
                    }
                    let o_row = &mut os[o_base..o_base + c];
                    for ch in 0..c {
                        o_row[ch] += bias[ch];
                    }
                }
            }
        }
        (out, DepthwiseConvCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &DepthwiseConvCache, dy: &FeatureMap) -> FeatureMap {
        let k = self.kernel;
        let pad = k / 2;
        let (h, w, c) = cache.input.dim();
        let in_std = cache.input.as_standard_layout();
        let xs = in_std.as_slice().unwrap();
        let dy_std = dy.as_standard_layout();
        let dys = dy_std.as_slice().unwrap();
        let mut dx = Array3::zeros((h, w, c));
        {
            let dxs = dx.as_slice_mut().unwrap();
            let Param { value, grad } = &mut self.weight;
            let ws = value.as_slice().unwrap();
            let dws = grad.as_slice_mut().unwrap();
            let dbs = self.bias.grad.as_slice_mut().unwrap();
            for oy in 0..h {
                for ox in 0..w {
                    let dy_row = &dys[(oy * w + ox) * c..][..c];
                    for ky in 0..k {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        for kx in 0..k {
                            let ix = ox + kx;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            let ix = ix - pad;
                            let k_base = (ky * k + kx) * c;
                            let i_base = (iy * w + ix) * c;
                            let w_row = &ws[k_base..k_base + c];
                            let dw_row = &mut dws[k_base..k_base + c];
                            let x_row = &xs[i_base..i_base + c];
                            let dx_row = &mut dxs[i_base..i_base + c];
                            for ch in 0..c {
                                let g = dy_row[ch];
                                dw_row[ch] += g * x_row[ch];
                                dx_row[ch] += g * w_row[ch];
                            }
                        }
                    }
                    for ch in 0..c {
                        dbs[ch] += dy_row[ch];
                    }
                }
            }
        }
        dx
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// 1x1 convolution
// ---------------------------------------------------------------------------

/// 1x1 convolution: per-position dense map, i.e. `(H*W, C_in) x (C_in, C_out)`.
/// Also serves as the stride-1 1x1 "deconvolution", which is the same map.
#[derive(Debug, Clone)]
pub struct PointwiseConv {
    pub weight: Param, // (C_in, C_out)
    pub bias: Param,   // (C_out,)
}

pub struct PointwiseConvCache {
    input: Array2<f64>,
    in_dim: (usize, usize, usize),
}

impl PointwiseConv {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(trunc_normal(&[c_in, c_out], INIT_STD, rng)),
            bias: Param::new(zeros(&[c_out])),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, PointwiseConvCache) {
        let (h, w, c) = x.dim();
        let input = as_matrix(x).to_owned();
        let weight = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = input.dot(&weight);
        out += &bias;
        let c_out = self.bias.len();
        let out = out.into_shape_with_order((h, w, c_out)).unwrap();
        (out, PointwiseConvCache { input, in_dim: (h, w, c) })
    }

    pub fn backward(&mut self, cache: &PointwiseConvCache, dy: &FeatureMap) -> FeatureMap {
        let dy_m = as_matrix(dy);
        let weight = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        {
            let mut dw = self.weight.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            dw += &cache.input.t().dot(&dy_m);
            let mut db = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            db += &dy_m.sum_axis(Axis(0));
        }
        let dx = dy_m.dot(&weight.t());
        dx.into_shape_with_order(cache.in_dim).unwrap()
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Dense (classifier head)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param, // (In, Out)
    pub bias: Param,   // (Out,)
}

pub struct DenseCache {
    input: FeatureVector,
}

impl Dense {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(trunc_normal(&[d_in, d_out], INIT_STD, rng)),
            bias: Param::new(zeros(&[d_out])),
        }
    }

    pub fn forward(&self, x: &FeatureVector) -> (FeatureVector, DenseCache) {
        let weight = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let out = x.dot(&weight) + &bias;
        (out, DenseCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &DenseCache, dy: &FeatureVector) -> FeatureVector {
        let weight = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        {
            let mut dw = self.weight.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            for (i, &xi) in cache.input.iter().enumerate() {
                for (j, &gj) in dy.iter().enumerate() {
                    dw[[i, j]] += xi * gj;
                }
            }
            let mut db = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            db += dy;
        }
        weight.dot(dy)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.044_715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

/// GELU in its tanh form; the closed-form derivative below matches it
/// exactly, which keeps finite-difference checks tight.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (sqrt_2_over_pi() * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let inner = sqrt_2_over_pi() * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let d_inner = sqrt_2_over_pi() * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Elementwise activations used by the decoder stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Gelu,
    LeakyRelu(f64),
    Elu(f64),
    Sigmoid,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Gelu => gelu(x),
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Elu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * (x.exp() - 1.0)
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::Gelu => gelu_prime(x),
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Elu(a) => {
                if x >= 0.0 {
                    1.0
                } else {
                    a * x.exp()
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
        }
    }

    pub fn forward_map(&self, x: &FeatureMap) -> (FeatureMap, ActivationCache) {
        let out = x.map(|&v| self.apply(v));
        (out, ActivationCache { input: x.clone() })
    }

    pub fn backward_map(&self, cache: &ActivationCache, dy: &FeatureMap) -> FeatureMap {
        let mut dx = cache.input.map(|&v| self.derivative(v));
        dx *= dy;
        dx
    }
}

pub struct ActivationCache {
    input: FeatureMap,
}
