//! Convolution and resampling layers with hand-written backward passes.
//!
//! Tensors are `(channels, height, width)` in `f32`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Below this many output channels a row-wise product beats the packed GEMM.
const FEW_OUTPUTS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out, in * k * k)`, input-channel major.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
        let weight = Array2::from_shape_simple_fn((out_ch, fan_in), || normal.sample(rng));
        Self {
            weight,
            bias: Array1::zeros(out_ch),
            kernel,
            stride,
            pad,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            ..*self
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Output columns `lo..hi` whose input column `ox * stride + kx - pad`
    /// lies inside `0..w`.
    fn valid_cols(&self, kx: usize, w: usize, ow: usize) -> (usize, usize) {
        let (s, pad) = (self.stride, self.pad);
        let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
        let hi = if w + pad > kx { ((w - 1 + pad - kx) / s + 1).min(ow) } else { 0 };
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &Array3<f32>) -> Array2<f32> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let (oh, ow) = self.out_dims(h, w);
        let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
        let xs = x.as_slice().expect("standard layout");
        let pad = self.pad as isize;
        for ci in 0..c {
            let plane = &xs[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    let dst = dst.as_slice_mut().expect("contiguous row");
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let (lo, hi) = self.valid_cols(kx, w, ow);
                        let out = &mut dst[oy * ow + lo..oy * ow + hi];
                        let start = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            out.copy_from_slice(&src[start..start + out.len()]);
                        } else {
                            for (o, &v) in out.iter_mut().zip(src[start..].iter().step_by(self.stride)) {
                                *o = v;
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f32>, c: usize, h: usize, w: usize) -> Array3<f32> {
        let k = self.kernel;
        let (oh, ow) = self.out_dims(h, w);
        let mut x = Array3::<f32>::zeros((c, h, w));
        let xs = x.as_slice_mut().expect("standard layout");
        let pad = self.pad as isize;
        for ci in 0..c {
            let plane = &mut xs[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = cols.row((ci * k + ky) * k + kx);
                    let src = row.as_slice().expect("contiguous row");
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let (lo, hi) = self.valid_cols(kx, w, ow);
                        let start = lo * self.stride + kx - self.pad;
                        let g = &src[oy * ow + lo..oy * ow + hi];
                        for (d, &v) in dst[start..].iter_mut().step_by(self.stride).zip(g) {
                            *d += v;
                        }
                    }
                }
            }
        }
        x
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Returns the output and what [`Conv2d::backward`] needs to replay it.
    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (oh, ow) = self.out_dims(h, w);
        let oc = self.out_channels();
        if oc <= FEW_OUTPUTS {
            let mut out = Array3::<f32>::zeros((oc, oh, ow));
            self.direct_forward(x, &mut out);
            return (out, ConvCache::Input(x.clone()));
        }
        let cache = if self.is_pointwise() {
            ConvCache::Input(x.as_standard_layout().into_owned())
        } else {
            ConvCache::Cols(self.im2col(x))
        };
        let mut out = Array2::<f32>::zeros((oc, oh * ow));
        general_mat_mul(1.0, &self.weight, &cache.cols(), 0.0, &mut out);
        for (mut row, &b) in out.rows_mut().into_iter().zip(&self.bias) {
            row += b;
        }
        let out = out.into_shape_with_order((oc, oh, ow)).expect("sized above");
        (out, cache)
    }

    /// Calls `f(o, weight index, output row range, input row, input start)`
    /// for every valid tap of a direct convolution.
    fn for_each_tap(&self, (c, h, w): (usize, usize, usize), mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize)) {
        let k = self.kernel;
        let (oh, ow) = self.out_dims(h, w);
        for o in 0..self.out_channels() {
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let (lo, hi) = self.valid_cols(kx, w, ow);
                        if lo >= hi {
                            continue;
                        }
                        let start = lo * self.stride + kx - self.pad;
                        for oy in 0..oh {
                            let iy = oy * self.stride + ky;
                            if iy < self.pad || iy - self.pad >= h {
                                continue;
                            }
                            f(o, (ci * k + ky) * k + kx, oy, lo, hi, ci, iy - self.pad, start);
                        }
                    }
                }
            }
        }
    }

    fn direct_forward(&self, x: &Array3<f32>, out: &mut Array3<f32>) {
        let (_, h, w) = x.dim();
        let (_, oh, ow) = out.dim();
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("standard layout");
        for (o, plane) in os.chunks_exact_mut(oh * ow).enumerate() {
            plane.fill(self.bias[o]);
        }
        let s = self.stride;
        self.for_each_tap(x.dim(), |o, widx, oy, lo, hi, ci, iy, start| {
            let wv = self.weight[[o, widx]];
            let dst = &mut os[(o * oh + oy) * ow + lo..(o * oh + oy) * ow + hi];
            let src = &xs[(ci * h + iy) * w + start..(ci * h + iy + 1) * w];
            if s == 1 {
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += wv * v;
                }
            } else {
                for (d, &v) in dst.iter_mut().zip(src.iter().step_by(s)) {
                    *d += wv * v;
                }
            }
        });
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(
        &self,
        cache: &ConvCache,
        in_dims: (usize, usize, usize),
        grad_out: &Array3<f32>,
        grad: &mut Conv2d,
    ) -> Array3<f32> {
        self.backward_impl(cache, in_dims, grad_out, grad, true)
            .expect("input gradient requested")
    }

    /// Accumulates parameter gradients only.
    pub fn backward_params(&self, cache: &ConvCache, in_dims: (usize, usize, usize), grad_out: &Array3<f32>, grad: &mut Conv2d) {
        self.backward_impl(cache, in_dims, grad_out, grad, false);
    }

    fn backward_impl(
        &self,
        cache: &ConvCache,
        in_dims: (usize, usize, usize),
        grad_out: &Array3<f32>,
        grad: &mut Conv2d,
        want_input: bool,
    ) -> Option<Array3<f32>> {
        let (oc, oh, ow) = grad_out.dim();
        let go = grad_out.as_standard_layout();
        let dy: ArrayView2<f32> = go.view().into_shape_with_order((oc, oh * ow)).expect("standard layout");
        grad.bias += &dy.sum_axis(ndarray::Axis(1));
        let (c, h, w) = in_dims;
        if oc <= FEW_OUTPUTS {
            let ConvCache::Input(x) = cache else {
                unreachable!("direct convolution caches its input")
            };
            let xs = x.as_slice().expect("standard layout");
            let dys = dy.as_slice().expect("standard layout");
            let mut dx = want_input.then(|| Array3::<f32>::zeros(in_dims));
            let s = self.stride;
            self.for_each_tap(in_dims, |o, widx, oy, lo, hi, ci, iy, start| {
                let g = &dys[(o * oh + oy) * ow + lo..(o * oh + oy) * ow + hi];
                let src = &xs[(ci * h + iy) * w + start..(ci * h + iy + 1) * w];
                grad.weight[[o, widx]] += if s == 1 {
                    dot(g, &src[..g.len()])
                } else {
                    g.iter().zip(src.iter().step_by(s)).map(|(&a, &b)| a * b).sum::<f32>()
                };
                if let Some(dx) = dx.as_mut() {
                    let wv = self.weight[[o, widx]];
                    let dxs = dx.as_slice_mut().expect("standard layout");
                    let dst = &mut dxs[(ci * h + iy) * w + start..(ci * h + iy + 1) * w];
                    if s == 1 {
                        for (d, &v) in dst.iter_mut().zip(g) {
                            *d += wv * v;
                        }
                    } else {
                        for (d, &v) in dst.iter_mut().step_by(s).zip(g) {
                            *d += wv * v;
                        }
                    }
                }
            });
            return dx;
        }
        let cols = cache.cols();
        general_mat_mul(1.0, &dy, &cols.t(), 1.0, &mut grad.weight);
        if !want_input {
            return None;
        }
        let mut dcols = Array2::<f32>::zeros(cols.raw_dim());
        general_mat_mul(1.0, &self.weight.t(), &dy, 0.0, &mut dcols);
        Some(if self.is_pointwise() {
            dcols.into_shape_with_order(in_dims).expect("pointwise shape")
        } else {
            self.col2im(&dcols, c, h, w)
        })
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// Saved forward state of one convolution.
#[derive(Debug, Clone)]
pub enum ConvCache {
    /// im2col matrix.
    Cols(Array2<f32>),
    /// The input itself, for pointwise and direct convolutions.
    Input(Array3<f32>),
}

impl ConvCache {
    fn cols(&self) -> ArrayView2<'_, f32> {
        match self {
            ConvCache::Cols(c) => c.view(),
            ConvCache::Input(x) => {
                let (c, h, w) = x.dim();
                x.view().into_shape_with_order((c, h * w)).expect("standard layout")
            }
        }
    }
}

pub fn relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zero the gradient where the rectified output was not positive.
pub fn relu_backward(output: &Array3<f32>, grad: &mut Array3<f32>) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f32>::zeros((c, 2 * h, 2 * w));
    for dy in 0..2 {
        for dx in 0..2 {
            out.slice_mut(s![.., dy..;2, dx..;2]).assign(x);
        }
    }
    out
}

pub fn upsample_nearest2_backward(grad: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = grad.dim();
    let mut out = Array3::<f32>::zeros((c, h / 2, w / 2));
    for dy in 0..2 {
        for dx in 0..2 {
            out += &grad.slice(s![.., dy..;2, dx..;2]);
        }
    }
    out
}

/// Source taps along one axis for half-pixel-centred 2x bilinear upsampling.
fn bilinear_taps(n_in: usize) -> Vec<(usize, usize, f32)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

/// Bilinear 2x upsampling, separable: rows first, then columns.
pub fn upsample_bilinear2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut out = Array3::<f32>::zeros((c, 2 * h, 2 * w));
    let os = out.as_slice_mut().expect("standard layout");
    let mut rows = vec![0f32; h * 2 * w];
    for ch in 0..c {
        let plane = &xs[ch * h * w..(ch + 1) * h * w];
        for (src, dst) in plane.chunks_exact(w).zip(rows.chunks_exact_mut(2 * w)) {
            for (d, &(x0, x1, wx)) in dst.iter_mut().zip(&tx) {
                *d = src[x0] + (src[x1] - src[x0]) * wx;
            }
        }
        let oplane = &mut os[ch * 4 * h * w..(ch + 1) * 4 * h * w];
        for (dst, &(y0, y1, wy)) in oplane.chunks_exact_mut(2 * w).zip(&ty) {
            let (a, b) = (&rows[y0 * 2 * w..(y0 + 1) * 2 * w], &rows[y1 * 2 * w..(y1 + 1) * 2 * w]);
            for ((d, &p), &q) in dst.iter_mut().zip(a).zip(b) {
                *d = p + (q - p) * wy;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear2`].
pub fn upsample_bilinear2_backward(grad: &Array3<f32>) -> Array3<f32> {
    let (c, h2, w2) = grad.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let gs = grad.as_standard_layout();
    let gs = gs.as_slice().expect("standard layout");
    let mut out = Array3::<f32>::zeros((c, h, w));
    let os = out.as_slice_mut().expect("standard layout");
    let mut rows = vec![0f32; h * w2];
    for ch in 0..c {
        rows.fill(0.0);
        let gplane = &gs[ch * h2 * w2..(ch + 1) * h2 * w2];
        for (g, &(y0, y1, wy)) in gplane.chunks_exact(w2).zip(&ty) {
            for (i, &v) in g.iter().enumerate() {
                rows[y0 * w2 + i] += v * (1.0 - wy);
                rows[y1 * w2 + i] += v * wy;
            }
        }
        let oplane = &mut os[ch * h * w..(ch + 1) * h * w];
        for (src, dst) in rows.chunks_exact(w2).zip(oplane.chunks_exact_mut(w)) {
            for (&v, &(x0, x1, wx)) in src.iter().zip(&tx) {
                dst[x0] += v * (1.0 - wx);
                dst[x1] += v * wx;
            }
        }
    }
    out
}
