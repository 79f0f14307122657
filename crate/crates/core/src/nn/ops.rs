//! Parameter-free layers and their backward passes.

use ndarray::{s, Array4, Axis};

use super::conv::shape4;
use crate::scalar::Scalar;

pub fn leaky_relu<T: Scalar>(mut x: Array4<T>, slope: T) -> Array4<T> {
    x.mapv_inplace(|v| if v > T::zero() { v } else { v * slope });
    x
}

/// Backward of [`leaky_relu`] given its *output*; positive outputs come from
/// positive inputs for any non-negative slope.
pub fn leaky_relu_backward<T: Scalar>(y: &Array4<T>, mut dy: Array4<T>, slope: T) -> Array4<T> {
    ndarray::Zip::from(&mut dy).and(y).for_each(|d, &v| {
        if v <= T::zero() {
            *d *= slope;
        }
    });
    dy
}

pub fn upsample2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let [n, c, h, w] = shape4(x);
    let mut out = Array4::zeros((n, c, 2 * h, 2 * w));
    for dy in 0..2 {
        for dx in 0..2 {
            out.slice_mut(s![.., .., dy..;2, dx..;2]).assign(x);
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
    let [n, c, h, w] = shape4(dy);
    let mut out = Array4::zeros((n, c, h / 2, w / 2));
    for oy in 0..2 {
        for ox in 0..2 {
            out += &dy.slice(s![.., .., oy..;2, ox..;2]);
        }
    }
    out
}

pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching N/H/W")
}

pub fn split_channels<T: Scalar>(x: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    (
        x.slice(s![.., ..first, .., ..]).to_owned(),
        x.slice(s![.., first.., .., ..]).to_owned(),
    )
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Channel-wise softmax of (N, C, H, W) logits.
pub fn softmax<T: Scalar>(logits: &Array4<T>) -> Array4<T> {
    let mut out = logits.to_owned();
    for mut img in out.outer_iter_mut() {
        for mut lane in img.lanes_mut(Axis(0)) {
            let m = lane.fold(T::neg_infinity(), |a, &b| a.max(b));
            lane.mapv_inplace(|v| (v - m).exp());
            let z = lane.sum();
            lane.mapv_inplace(|v| v / z);
        }
    }
    out
}

/// Gradient through softmax: dz = p ⊙ (dp − Σ_c p·dp).
pub fn softmax_backward<T: Scalar>(probs: &Array4<T>, dprobs: &Array4<T>) -> Array4<T> {
    let mut out = Array4::zeros(probs.raw_dim());
    for ((mut o, p), d) in out
        .outer_iter_mut()
        .zip(probs.outer_iter())
        .zip(dprobs.outer_iter())
    {
        for ((mut ol, pl), dl) in o
            .lanes_mut(Axis(0))
            .into_iter()
            .zip(p.lanes(Axis(0)))
            .zip(d.lanes(Axis(0)))
        {
            let dot: T = pl.iter().zip(dl.iter()).map(|(&a, &b)| a * b).sum();
            for ((ov, &pv), &dv) in ol.iter_mut().zip(pl.iter()).zip(dl.iter()) {
                *ov = pv * (dv - dot);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Array4::from_shape_fn((1, 2, 3, 3), |(_, c, i, j)| (c * 9 + i * 3 + j) as f64);
        let g = Array4::from_shape_fn((1, 2, 6, 6), |(_, c, i, j)| ((c + i * 7 + j * 3) % 5) as f64);
        let lhs = (&upsample2(&x) * &g).sum();
        let rhs = (&x * &upsample2_backward(&g)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let p = softmax(&Array4::<f64>::zeros((1, 4, 2, 2)));
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let z = Array4::from_shape_fn((1, 3, 2, 1), |(_, c, i, _)| (c as f64 - 1.0) * (i as f64 + 0.5));
        let probe = Array4::from_shape_fn((1, 3, 2, 1), |(_, c, i, _)| (c * 2 + i) as f64 * 0.3 - 0.4);
        let f = |z: &Array4<f64>| (&softmax(z) * &probe).sum();
        let g = softmax_backward(&softmax(&z), &probe);
        for idx in [[0, 0, 0, 0], [0, 2, 1, 0], [0, 1, 1, 0]] {
            let mut zp = z.clone();
            zp[idx] += 1e-6;
            let mut zm = z.clone();
            zm[idx] -= 1e-6;
            let fd = (f(&zp) - f(&zm)) / 2e-6;
            assert!((fd - g[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }
}
