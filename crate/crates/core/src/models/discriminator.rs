use ndarray::{Array1, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{leaky_relu, leaky_relu_backward, sigmoid};
use crate::nn::{Conv2d, ConvCache, Padding, Parameters};
use crate::scalar::Scalar;

/// Spatial reduction between the concatenation map and the decision map.
pub const REGION_STRIDE: usize = 16;
/// Index (1-based) of the conv layer whose activation feeds feature matching.
pub const FEATURE_LAYER: usize = 4;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Five 4×4 convolutions (strides 2,2,2,2,1) followed by global average
/// pooling of the final single-channel map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator<T> {
    convs: [Conv2d<T>; 5],
    in_channels: usize,
}

/// Everything the discriminator produces for a batch.
#[derive(Clone, Debug)]
pub struct DiscriminatorOutput<T> {
    /// Pre-sigmoid region scores, (N, 1, H/16, W/16).
    pub rc_logits: Array4<T>,
    /// Region-consistency decision map `rc`, values in [0, 1].
    pub rc: Array4<T>,
    /// Activation after [`FEATURE_LAYER`], (N, F, H/16, W/16).
    pub features: Array4<T>,
    /// Pooled pre-sigmoid score per image.
    pub score_logits: Array1<T>,
    /// Pooled score `s` per image.
    pub scores: Array1<T>,
}

pub struct DiscriminatorCache<T> {
    convs: Vec<ConvCache<T>>,
    acts: Vec<Array4<T>>,
}

/// Sigmoid of the spatial mean of each image's region logits.
pub fn pooled_scores<T: Scalar>(rc_logits: &Array4<T>) -> (Array1<T>, Array1<T>) {
    let n = rc_logits.shape()[0];
    let logits: Array1<T> = (0..n)
        .map(|i| {
            let plane = rc_logits.index_axis(Axis(0), i);
            plane.sum() / T::from_usize_lossy(plane.len())
        })
        .collect();
    let scores = logits.mapv(sigmoid);
    (logits, scores)
}

impl<T: Scalar> Discriminator<T> {
    /// `in_channels` is 3 + number of classes; `width` is the first layer's
    /// channel count (doubling up to 8× width).
    pub fn new(seed: u64, in_channels: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chans = [in_channels, width, 2 * width, 4 * width, 8 * width];
        let mut convs: Vec<Conv2d<T>> = (0..4)
            .map(|i| Conv2d::new(&mut rng, chans[i], chans[i + 1], 4, 2, Padding::same(1), LEAKY_SLOPE))
            .collect();
        convs.push(Conv2d::new(&mut rng, chans[4], 1, 4, 1, Padding { lo: 1, hi: 2 }, 1.0));
        Discriminator {
            convs: convs.try_into().unwrap_or_else(|_| unreachable!()),
            in_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn feature_channels(&self) -> usize {
        self.convs[FEATURE_LAYER - 1].out_channels()
    }

    pub fn check_input(&self, concat: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = concat.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {c}",
                self.in_channels
            )));
        }
        if h < REGION_STRIDE || w < REGION_STRIDE {
            return Err(Error::Shape(format!(
                "discriminator input {h}x{w} is smaller than {REGION_STRIDE}x{REGION_STRIDE}"
            )));
        }
        if h % REGION_STRIDE != 0 || w % REGION_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "discriminator input {h}x{w} is not a multiple of {REGION_STRIDE}"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, concat: &Array4<T>) -> Result<(DiscriminatorOutput<T>, DiscriminatorCache<T>)> {
        self.check_input(concat)?;
        let slope = T::lit(LEAKY_SLOPE);
        let mut caches = Vec::with_capacity(5);
        let mut acts: Vec<Array4<T>> = Vec::with_capacity(4);
        for conv in &self.convs[..4] {
            let (a, cache) = conv.forward(acts.last().unwrap_or(concat));
            acts.push(leaky_relu(a, slope));
            caches.push(cache);
        }
        let (rc_logits, cache) = self.convs[4].forward(&acts[3]);
        caches.push(cache);
        let rc = rc_logits.mapv(sigmoid);
        let (score_logits, scores) = pooled_scores(&rc_logits);
        let out = DiscriminatorOutput {
            rc_logits,
            rc,
            features: acts[FEATURE_LAYER - 1].clone(),
            score_logits,
            scores,
        };
        Ok((out, DiscriminatorCache { convs: caches, acts }))
    }

    /// Backward from region logits and/or feature-layer gradients. Parameter
    /// gradients go into `grad` when given; the input gradient is returned
    /// when requested.
    pub fn backward(
        &self,
        cache: &DiscriminatorCache<T>,
        d_rc_logits: Option<&Array4<T>>,
        d_features: Option<&Array4<T>>,
        mut grad: Option<&mut Self>,
        need_input_grad: bool,
    ) -> Option<Array4<T>> {
        let slope = T::lit(LEAKY_SLOPE);
        let mut d: Option<Array4<T>> = d_rc_logits.and_then(|g| {
            self.convs[4].backward(
                &cache.convs[4],
                g,
                grad.as_deref_mut().map(|gr| &mut gr.convs[4]),
                true,
            )
        });
        for i in (0..4).rev() {
            if i + 1 == FEATURE_LAYER {
                if let Some(f) = d_features {
                    d = Some(match d {
                        Some(prev) => prev + f,
                        None => f.clone(),
                    });
                }
            }
            let Some(dy) = d.take() else { continue };
            let d_act = leaky_relu_backward(&cache.acts[i], dy, slope);
            let want_input = i > 0 || need_input_grad;
            d = self.convs[i].backward(
                &cache.convs[i],
                &d_act,
                grad.as_deref_mut().map(|gr| &mut gr.convs[i]),
                want_input,
            );
        }
        d
    }
}

impl<T: Scalar> Parameters<T> for Discriminator<T> {
    fn param_slices(&self) -> Vec<&[T]> {
        self.convs.iter().flat_map(|c| c.param_slices()).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.convs.iter_mut().flat_map(|c| c.param_slices_mut()).collect()
    }

    fn zeros_like(&self) -> Self {
        Discriminator {
            convs: std::array::from_fn(|i| self.convs[i].zeros_like()),
            in_channels: self.in_channels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn concat(seed: u64, n: usize, c: usize, h: usize) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((n, c, h, h), || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn decision_map_has_stride_sixteen() {
        let d = Discriminator::<f64>::new(0, 6, 4);
        let (out, _) = d.forward(&concat(0, 2, 6, 64)).unwrap();
        assert_eq!(out.rc.dim(), (2, 1, 4, 4));
        assert_eq!(out.features.dim(), (2, 32, 4, 4));
        assert!(out.rc.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.scores.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn tiny_inputs_are_rejected() {
        let d = Discriminator::<f64>::new(0, 5, 2);
        assert!(d.forward(&concat(0, 1, 5, 8)).is_err());
        assert!(d.forward(&concat(0, 1, 4, 16)).is_err());
    }

    #[test]
    fn pooled_score_is_sigmoid_of_mean_logit() {
        let rc_logits = array![[[[1.0f64, -2.0], [0.5, 2.5]]]];
        let (logit, score) = pooled_scores(&rc_logits);
        assert!((logit[0] - 0.5).abs() < 1e-15);
        assert!((score[0] - 1.0 / (1.0 + (-0.5f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn features_match_in_shape_for_any_probability_source() {
        let d = Discriminator::<f64>::new(1, 5, 2);
        let (a, _) = d.forward(&concat(1, 1, 5, 32)).unwrap();
        let (b, _) = d.forward(&concat(2, 1, 5, 32)).unwrap();
        assert_eq!(a.features.dim(), b.features.dim());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let d = Discriminator::<f64>::new(3, 5, 2);
        let x = concat(4, 2, 5, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probe_rc = Array4::from_shape_simple_fn((2, 1, 2, 2), || rng.gen_range(-1.0..1.0));
        let probe_f = Array4::from_shape_simple_fn((2, 16, 2, 2), || rng.gen_range(-1.0..1.0));
        let objective = |d: &Discriminator<f64>, x: &Array4<f64>| {
            let (o, _) = d.forward(x).unwrap();
            (&o.rc_logits * &probe_rc).sum() + (&o.features * &probe_f).sum()
        };
        let (_, cache) = d.forward(&x).unwrap();
        let mut grad = d.zeros_like();
        let dx = d
            .backward(&cache, Some(&probe_rc), Some(&probe_f), Some(&mut grad), true)
            .unwrap();
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 4, 17, 9], [0, 2, 31, 31]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (objective(&d, &xp) - objective(&d, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        let analytic: Vec<f64> = grad.param_slices().iter().flat_map(|s| s.iter().copied()).collect();
        for flat in (0..analytic.len()).step_by(97) {
            let perturbed = |delta: f64| {
                let mut dd = d.clone();
                let mut k = flat;
                for s in dd.param_slices_mut() {
                    if k < s.len() {
                        s[k] += delta;
                        break;
                    }
                    k -= s.len();
                }
                objective(&dd, &x)
            };
            let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            assert!((fd - analytic[flat]).abs() < 1e-6 * (1.0 + fd.abs()), "param {flat}");
        }
    }

    #[test]
    fn frozen_backward_leaves_no_parameter_gradient() {
        let d = Discriminator::<f64>::new(3, 5, 2);
        let x = concat(4, 1, 5, 16);
        let (out, cache) = d.forward(&x).unwrap();
        let dx = d.backward(&cache, None, Some(&out.features), None, true).unwrap();
        assert_eq!(dx.dim(), x.dim());
    }
}
