use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::ops::{concat_channels, leaky_relu, leaky_relu_backward, split_channels, upsample2, upsample2_backward};
use crate::nn::{crop, pad_to, Conv2d, ConvCache, Padding, Parameters};
use crate::scalar::Scalar;

/// Total downsampling factor of the encoder (four stride-2 stages).
pub const BRANCH_STRIDE: usize = 16;

/// Small U-shaped encoder–decoder producing per-pixel class logits.
///
/// Layout (w = width): stem w → 2w → 4w → 4w → 4w at 1/16 resolution, then
/// four nearest-upsample + skip-concat + 3×3 conv stages back to full size and
/// a 1×1 classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationBranch<T> {
    stem: Conv2d<T>,
    down: [Conv2d<T>; 4],
    up: [Conv2d<T>; 4],
    head: Conv2d<T>,
    num_classes: usize,
}

pub struct BranchCache<T> {
    in_hw: (usize, usize),
    stem: ConvCache<T>,
    /// Encoder activations: stem output then each down stage.
    enc: Vec<Array4<T>>,
    down: Vec<ConvCache<T>>,
    /// Decoder activations, deepest first.
    dec: Vec<Array4<T>>,
    up: Vec<ConvCache<T>>,
    /// Channel count of the upsampled tensor in each decoder concat.
    up_split: Vec<usize>,
    head: ConvCache<T>,
}

impl<T: Scalar> SegmentationBranch<T> {
    pub fn new(seed: u64, width: usize, num_classes: usize) -> Self {
        assert!(num_classes >= 2, "at least two classes required");
        assert!(width >= 1, "width must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = width;
        let conv3 = |rng: &mut ChaCha8Rng, i, o, s| Conv2d::new(rng, i, o, 3, s, Padding::same(1), 0.0);
        let stem = conv3(&mut rng, 3, w, 1);
        let enc_ch = [w, 2 * w, 4 * w, 4 * w, 4 * w];
        let down = std::array::from_fn(|i| conv3(&mut rng, enc_ch[i], enc_ch[i + 1], 2));
        // decoder stage i consumes up(previous) ++ skip enc_ch[3 - i]
        let dec_out = [4 * w, 2 * w, w, w];
        let mut prev = enc_ch[4];
        let up = std::array::from_fn(|i| {
            let conv = conv3(&mut rng, prev + enc_ch[3 - i], dec_out[i], 1);
            prev = dec_out[i];
            conv
        });
        let head = Conv2d::new(&mut rng, w, num_classes, 1, 1, Padding::same(0), 0.0);
        SegmentationBranch {
            stem,
            down,
            up,
            head,
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Logits (N, C, H, W). Inputs whose size is not a multiple of 16 are
    /// zero-padded internally and the output is cropped back.
    pub fn forward(&self, images: &Array4<T>) -> (Array4<T>, BranchCache<T>) {
        let (_, c, h, w) = images.dim();
        assert_eq!(c, 3, "branch expects RGB input");
        let ph = h.div_ceil(BRANCH_STRIDE) * BRANCH_STRIDE;
        let pw = w.div_ceil(BRANCH_STRIDE) * BRANCH_STRIDE;
        let x = pad_to(images, ph, pw);
        let zero = T::zero();

        let (a, stem) = self.stem.forward(&x);
        let mut enc = vec![leaky_relu(a, zero)];
        let mut down = Vec::with_capacity(4);
        for conv in &self.down {
            let (a, cache) = conv.forward(enc.last().expect("stem"));
            enc.push(leaky_relu(a, zero));
            down.push(cache);
        }

        let mut dec: Vec<Array4<T>> = Vec::with_capacity(4);
        let mut up = Vec::with_capacity(4);
        let mut up_split = Vec::with_capacity(4);
        for (i, conv) in self.up.iter().enumerate() {
            let prev = dec.last().unwrap_or(&enc[4]);
            let upsampled = upsample2(prev);
            up_split.push(upsampled.shape()[1]);
            let joined = concat_channels(&upsampled, &enc[3 - i]);
            let (a, cache) = conv.forward(&joined);
            dec.push(leaky_relu(a, zero));
            up.push(cache);
        }
        let (logits, head) = self.head.forward(dec.last().expect("decoder"));
        let logits = crop(&logits, h, w);
        let cache = BranchCache {
            in_hw: (h, w),
            stem,
            enc,
            down,
            dec,
            up,
            up_split,
            head,
        };
        (logits, cache)
    }

    /// Logits without retaining activations.
    pub fn predict(&self, images: &Array4<T>) -> Array4<T> {
        self.forward(images).0
    }

    /// Backpropagates `dlogits` and accumulates parameter gradients.
    pub fn backward(&self, cache: &BranchCache<T>, dlogits: &Array4<T>, grad: &mut Self) {
        let zero = T::zero();
        let (ph, pw) = {
            let s = cache.dec[3].shape();
            (s[2], s[3])
        };
        debug_assert_eq!(dlogits.shape()[2..], [cache.in_hw.0, cache.in_hw.1]);
        let dz = pad_to(dlogits, ph, pw);
        let mut d = self
            .head
            .backward(&cache.head, &dz, Some(&mut grad.head), true)
            .expect("input grad");

        let mut skip_grads: Vec<Option<Array4<T>>> = vec![None; 5];
        for i in (0..4).rev() {
            let d_act = leaky_relu_backward(&cache.dec[i], d, zero);
            let d_join = self.up[i]
                .backward(&cache.up[i], &d_act, Some(&mut grad.up[i]), true)
                .expect("input grad");
            let (d_up, d_skip) = split_channels(&d_join, cache.up_split[i]);
            skip_grads[3 - i] = Some(d_skip);
            d = upsample2_backward(&d_up);
        }

        // d now holds the gradient w.r.t. the deepest encoder activation.
        for i in (0..4).rev() {
            let d_act = leaky_relu_backward(&cache.enc[i + 1], d, zero);
            let mut d_in = self.down[i]
                .backward(&cache.down[i], &d_act, Some(&mut grad.down[i]), true)
                .expect("input grad");
            if let Some(skip) = skip_grads[i].take() {
                d_in += &skip;
            }
            d = d_in;
        }
        let d_act = leaky_relu_backward(&cache.enc[0], d, zero);
        self.stem.backward(&cache.stem, &d_act, Some(&mut grad.stem), false);
    }
}

impl<T: Scalar> Parameters<T> for SegmentationBranch<T> {
    fn param_slices(&self) -> Vec<&[T]> {
        let mut out = self.stem.param_slices();
        for c in self.down.iter().chain(&self.up) {
            out.extend(c.param_slices());
        }
        out.extend(self.head.param_slices());
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.stem.param_slices_mut();
        for c in self.down.iter_mut().chain(self.up.iter_mut()) {
            out.extend(c.param_slices_mut());
        }
        out.extend(self.head.param_slices_mut());
        out
    }

    fn zeros_like(&self) -> Self {
        SegmentationBranch {
            stem: self.stem.zeros_like(),
            down: std::array::from_fn(|i| self.down[i].zeros_like()),
            up: std::array::from_fn(|i| self.up[i].zeros_like()),
            head: self.head.zeros_like(),
            num_classes: self.num_classes,
        }
    }
}
