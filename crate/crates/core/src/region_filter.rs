//! Local pseudo-label filtering: argmax labels, region verdict upsampling and
//! masked pseudo-label selection.

use ndarray::{s, Array3, Array4, Axis};

use crate::data::{LabelMap, IGNORE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// (B, H, W) boolean selection mask.
pub type FilterMask = Array3<bool>;

/// Per-pixel argmax over the channel axis; ties resolve to the lowest class.
///
/// Works on logits or probabilities alike since softmax is monotone.
pub fn to_prediction_label<T: Scalar>(scores: &Array4<T>) -> LabelMap {
    let (b, c, h, w) = scores.dim();
    debug_assert!(c >= 2);
    let mut out = Array3::<u8>::zeros((b, h, w));
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                let mut best_v = scores[[n, 0, y, x]];
                for k in 1..c {
                    let v = scores[[n, k, y, x]];
                    if v > best_v {
                        best = k;
                        best_v = v;
                    }
                }
                out[[n, y, x]] = best as u8;
            }
        }
    }
    out
}

/// Integer replication factors from a (B, 1, h, w) map to `target`.
pub(crate) fn block_factors(map_hw: (usize, usize), target: (usize, usize)) -> Result<(usize, usize)> {
    let (h, w) = map_hw;
    let (th, tw) = target;
    if h == 0 || w == 0 || th % h != 0 || tw % w != 0 {
        return Err(Error::Shape(format!(
            "target {th}x{tw} is not a multiple of decision map {h}x{w}"
        )));
    }
    Ok((th / h, tw / w))
}

/// Nearest-neighbour upsampling of `rc ≥ ε` to the image size.
pub fn upsample_decision<T: Scalar>(rc: &Array4<T>, target: (usize, usize), eps: T) -> Result<FilterMask> {
    let (b, c, h, w) = rc.dim();
    if c != 1 {
        return Err(Error::Shape(format!("decision map must have 1 channel, got {c}")));
    }
    let (fy, fx) = block_factors((h, w), target)?;
    let (th, tw) = target;
    Ok(Array3::from_shape_fn((b, th, tw), |(n, y, x)| {
        rc[[n, 0, y / fy, x / fx]] >= eps
    }))
}

/// Copies `p_l` where `m` is set, IGNORE elsewhere.
pub fn select_pseudo_labels(p_l: &LabelMap, m: &FilterMask) -> Result<LabelMap> {
    if p_l.dim() != m.dim() {
        return Err(Error::Shape(format!(
            "label map {:?} vs mask {:?}",
            p_l.dim(),
            m.dim()
        )));
    }
    let mut out = p_l.clone();
    ndarray::Zip::from(&mut out).and(m).for_each(|l, &keep| {
        if !keep {
            *l = IGNORE;
        }
    });
    Ok(out)
}

/// One-hot (B, C, H, W) encoding; IGNORE pixels become all-zero vectors.
pub fn one_hot<T: Scalar>(labels: &LabelMap, num_classes: usize) -> Array4<T> {
    let (b, h, w) = labels.dim();
    let mut out = Array4::<T>::zeros((b, num_classes, h, w));
    for ((n, y, x), &l) in labels.indexed_iter() {
        if l != IGNORE && (l as usize) < num_classes {
            out[[n, l as usize, y, x]] = T::one();
        }
    }
    out
}

/// Image channels followed by class-probability channels.
pub fn make_concat<T: Scalar>(images: &Array4<T>, probs: &Array4<T>) -> Result<Array4<T>> {
    let (bi, ci, hi, wi) = images.dim();
    let (bp, _, hp, wp) = probs.dim();
    if ci != 3 || (bi, hi, wi) != (bp, hp, wp) {
        return Err(Error::Shape(format!(
            "cannot concatenate images {:?} with probabilities {:?}",
            images.dim(),
            probs.dim()
        )));
    }
    Ok(ndarray::concatenate(Axis(1), &[images.view(), probs.view()]).expect("checked shapes"))
}

/// Probability channels of a concatenation map (drops the 3 image channels).
pub fn concat_probability_part<T: Scalar>(concat: &Array4<T>) -> Array4<T> {
    concat.slice(s![.., 3.., .., ..]).to_owned()
}
