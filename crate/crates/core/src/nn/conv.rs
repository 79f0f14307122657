use ndarray::{s, Array1, Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Zero padding applied before and after each spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub lo: usize,
    pub hi: usize,
}

impl Padding {
    pub const fn same(p: usize) -> Self {
        Padding { lo: p, hi: p }
    }
}

/// Square-kernel 2-D convolution lowered onto a single matrix product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d<T> {
    /// (out_channels, in_channels, k, k)
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub stride: usize,
    pub pad: Padding,
}

/// Saved activations for the backward pass.
pub struct ConvCache<T> {
    col: Array2<T>,
    in_shape: [usize; 4],
    out_hw: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialisation scaled for the given activation slope.
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: Padding,
        slope: f64,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = (2.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = Array4::from_shape_simple_fn((out_ch, in_ch, kernel, kernel), || {
            T::lit(normal.sample(rng))
        });
        Conv2d {
            weight,
            bias: Array1::zeros(out_ch),
            stride,
            pad,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        let span = |n: usize| (n + self.pad.lo + self.pad.hi - k) / self.stride + 1;
        (span(h), span(w))
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        let (co, ci, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("contiguous weight")
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, ConvCache<T>) {
        let [n, c, h, w] = shape4(x);
        assert_eq!(c, self.in_channels(), "conv input channel mismatch");
        let (ho, wo) = self.output_size(h, w);
        let col = im2col(x, self.kernel(), self.stride, self.pad, ho, wo);
        let prod = self.weight_matrix().dot(&col);
        let out = scatter_batch(&prod, n, ho, wo, Some(&self.bias));
        let cache = ConvCache {
            col,
            in_shape: [n, c, h, w],
            out_hw: (ho, wo),
        };
        (out, cache)
    }

    /// Accumulates parameter gradients into `grad` (when given) and optionally
    /// returns the gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        dy: &Array4<T>,
        grad: Option<&mut Conv2d<T>>,
        need_input_grad: bool,
    ) -> Option<Array4<T>> {
        let [n, _, _, _] = cache.in_shape;
        let (ho, wo) = cache.out_hw;
        let dy2 = gather_batch(dy, n, ho, wo);

        if let Some(grad) = grad {
            let (co, ci, k, _) = grad.weight.dim();
            let dw = dy2.dot(&cache.col.t());
            let mut gw = grad
                .weight
                .view_mut()
                .into_shape_with_order((co, ci * k * k))
                .expect("contiguous weight grad");
            gw += &dw;
            grad.bias += &dy2.sum_axis(Axis(1));
        }

        if !need_input_grad {
            return None;
        }
        let dcol = self.weight_matrix().t().dot(&dy2);
        Some(col2im(
            &dcol,
            cache.in_shape,
            self.kernel(),
            self.stride,
            self.pad,
            ho,
            wo,
        ))
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        vec![
            self.weight.as_slice().expect("contiguous"),
            self.bias.as_slice().expect("contiguous"),
        ]
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.weight.as_slice_mut().expect("contiguous"),
            self.bias.as_slice_mut().expect("contiguous"),
        ]
    }
}

pub(crate) fn shape4<T>(x: &Array4<T>) -> [usize; 4] {
    let (n, c, h, w) = x.dim();
    [n, c, h, w]
}

/// Rows index (channel, ky, kx); columns index (batch, oy, ox).
fn im2col<T: Scalar>(
    x: &Array4<T>,
    k: usize,
    stride: usize,
    pad: Padding,
    ho: usize,
    wo: usize,
) -> Array2<T> {
    let [n, c, h, w] = shape4(x);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let cols = n * ho * wo;
    let mut col = Array2::<T>::zeros((c * k * k, cols));
    let cs = col.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cs[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let plane = &xs[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad.lo as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut dst_row[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad.lo as isize;
                            if ix >= 0 && (ix as usize) < w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(
    dcol: &Array2<T>,
    in_shape: [usize; 4],
    k: usize,
    stride: usize,
    pad: Padding,
    ho: usize,
    wo: usize,
) -> Array4<T> {
    let [n, c, h, w] = in_shape;
    let cols = n * ho * wo;
    let dcol = dcol.as_standard_layout();
    let ds = dcol.as_slice().expect("standard layout");
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    let xs = dx.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &ds[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let base = (b * c + ci) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad.lo as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &src_row[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        let dst = &mut xs[base + iy as usize * w..base + (iy as usize + 1) * w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad.lo as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// (C, N·H·W) → (N, C, H, W), adding a per-channel bias.
fn scatter_batch<T: Scalar>(
    prod: &Array2<T>,
    n: usize,
    h: usize,
    w: usize,
    bias: Option<&Array1<T>>,
) -> Array4<T> {
    let c = prod.shape()[0];
    let hw = h * w;
    let prod = prod.as_standard_layout();
    let ps = prod.as_slice().expect("standard layout");
    let mut out = Array4::<T>::zeros((n, c, h, w));
    let os = out.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        let b = bias.map_or(T::zero(), |bias| bias[ch]);
        for img in 0..n {
            let src = &ps[ch * n * hw + img * hw..ch * n * hw + (img + 1) * hw];
            let dst = &mut os[(img * c + ch) * hw..(img * c + ch + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + b;
            }
        }
    }
    out
}

/// (N, C, H, W) → (C, N·H·W).
fn gather_batch<T: Scalar>(x: &Array4<T>, n: usize, h: usize, w: usize) -> Array2<T> {
    let c = x.shape()[1];
    let hw = h * w;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array2::<T>::zeros((c, n * hw));
    let os = out.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        for img in 0..n {
            os[ch * n * hw + img * hw..ch * n * hw + (img + 1) * hw]
                .copy_from_slice(&xs[(img * c + ch) * hw..(img * c + ch + 1) * hw]);
        }
    }
    out
}

/// Crops the top-left `h × w` window of every plane.
pub fn crop<T: Scalar>(x: &Array4<T>, h: usize, w: usize) -> Array4<T> {
    x.slice(s![.., .., ..h, ..w]).to_owned()
}

/// Zero-pads every plane at the bottom/right up to `h × w`.
pub fn pad_to<T: Scalar>(x: &Array4<T>, h: usize, w: usize) -> Array4<T> {
    let [n, c, xh, xw] = shape4(x);
    if xh == h && xw == w {
        return x.clone();
    }
    let mut out = Array4::zeros((n, c, h, w));
    out.slice_mut(s![.., .., ..xh, ..xw]).assign(x);
    out
}
