//! Training objectives with closed-form gradients.
//!
//! Every pixel loss here funnels through [`masked_ce`]: a weighted
//! cross-entropy averaged over the pixels that carry a positive weight and a
//! non-IGNORE target. Pseudo-label targets are always computed from detached
//! logits, so gradients never flow through the argmax.

use ndarray::{Array1, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, IGNORE};
use crate::drlc::{combine_decision_maps, weight_mask};
use crate::error::{Error, Result};
use crate::nn::ops::sigmoid;
use crate::region_filter::{to_prediction_label, upsample_decision};
use crate::scalar::Scalar;

/// Named hyper-parameter presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossProfile {
    Voc,
    Cityscapes,
}

/// λ1 (CPS), λ2 (selection / dynamic region), λ3 (feature matching), ε.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossSection", into = "LossSection")]
pub struct LossWeights {
    pub profile: LossProfile,
    pub lambda_cps: f64,
    pub lambda_select: f64,
    pub lambda_fm: f64,
    pub epsilon: f64,
}

impl LossWeights {
    pub fn voc() -> Self {
        LossWeights {
            profile: LossProfile::Voc,
            lambda_cps: 1.0,
            lambda_select: 1.0,
            lambda_fm: 0.1,
            epsilon: 0.6,
        }
    }

    /// Same as VOC except λ1 = 5 and ε = 0.7.
    pub fn cityscapes() -> Self {
        LossWeights {
            profile: LossProfile::Cityscapes,
            lambda_cps: 5.0,
            epsilon: 0.7,
            ..Self::voc()
        }
    }

    pub fn for_profile(p: LossProfile) -> Self {
        match p {
            LossProfile::Voc => Self::voc(),
            LossProfile::Cityscapes => Self::cityscapes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda_cps),
            ("lambda2", self.lambda_select),
            ("lambda3", self.lambda_fm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "loss.epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::voc()
    }
}

/// On-disk form: a profile plus optional per-field overrides.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossSection {
    #[serde(default = "default_profile")]
    profile: LossProfile,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    lambda3: Option<f64>,
    epsilon: Option<f64>,
}

fn default_profile() -> LossProfile {
    LossProfile::Voc
}

impl TryFrom<LossSection> for LossWeights {
    type Error = Error;

    fn try_from(s: LossSection) -> Result<Self> {
        let base = LossWeights::for_profile(s.profile);
        let w = LossWeights {
            profile: s.profile,
            lambda_cps: s.lambda1.unwrap_or(base.lambda_cps),
            lambda_select: s.lambda2.unwrap_or(base.lambda_select),
            lambda_fm: s.lambda3.unwrap_or(base.lambda_fm),
            epsilon: s.epsilon.unwrap_or(base.epsilon),
        };
        w.validate()?;
        Ok(w)
    }
}

impl From<LossWeights> for LossSection {
    fn from(w: LossWeights) -> Self {
        LossSection {
            profile: w.profile,
            lambda1: Some(w.lambda_cps),
            lambda2: Some(w.lambda_select),
            lambda3: Some(w.lambda_fm),
            epsilon: Some(w.epsilon),
        }
    }
}

/// Loss value with its gradient w.r.t. the logits it was computed from.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Array4<T>,
}

/// A filtered self-training loss plus the fraction of pixels it kept.
#[derive(Clone, Debug)]
pub struct SelectionLoss<T> {
    pub value: T,
    pub grad: Array4<T>,
    pub selected_fraction: f64,
}

fn check_finite<T: Scalar>(logits: &Array4<T>, what: &str) -> Result<()> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value in {what}")));
    }
    Ok(())
}

/// Weighted cross-entropy averaged over pixels with weight > 0 and a
/// non-IGNORE target; zero (with zero gradient) when no pixel qualifies.
pub fn masked_ce<T: Scalar>(logits: &Array4<T>, target: &LabelMap, weight: &Array3<T>) -> Result<LossGrad<T>> {
    let (b, c, h, w) = logits.dim();
    if target.dim() != (b, h, w) || weight.dim() != (b, h, w) {
        return Err(Error::Shape(format!(
            "logits {:?}, target {:?}, weight {:?}",
            logits.dim(),
            target.dim(),
            weight.dim()
        )));
    }
    check_finite(logits, "logits")?;
    let mut grad = Array4::<T>::zeros((b, c, h, w));
    let mut total = T::zero();
    let mut count = 0usize;
    let mut probs = vec![T::zero(); c];
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let t = target[[n, y, x]];
                let wt = weight[[n, y, x]];
                if t == IGNORE || wt <= T::zero() {
                    continue;
                }
                let t = t as usize;
                if t >= c {
                    return Err(Error::Shape(format!("target class {t} >= {c} channels")));
                }
                let m = (0..c).fold(T::neg_infinity(), |a, k| a.max(logits[[n, k, y, x]]));
                let mut z = T::zero();
                for (k, p) in probs.iter_mut().enumerate() {
                    *p = (logits[[n, k, y, x]] - m).exp();
                    z += *p;
                }
                let log_z = z.ln() + m;
                total += wt * (log_z - logits[[n, t, y, x]]);
                for (k, p) in probs.iter().enumerate() {
                    let onehot = if k == t { T::one() } else { T::zero() };
                    grad[[n, k, y, x]] = wt * (*p / z - onehot);
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(LossGrad {
            value: T::zero(),
            grad,
        });
    }
    let norm = T::from_usize_lossy(count);
    grad.mapv_inplace(|g| g / norm);
    Ok(LossGrad {
        value: total / norm,
        grad,
    })
}

fn unit_weights<T: Scalar>(logits: &Array4<T>) -> Array3<T> {
    let (b, _, h, w) = logits.dim();
    Array3::from_elem((b, h, w), T::one())
}

/// Cross-entropy against the branch's own argmax, restricted to pixels whose
/// upsampled region verdict satisfies rc ≥ ε.
pub fn local_selection_loss<T: Scalar>(logits: &Array4<T>, rc: &Array4<T>, eps: T) -> Result<SelectionLoss<T>> {
    check_finite(logits, "logits")?;
    let (_, _, h, w) = logits.dim();
    let target = to_prediction_label(logits);
    let mask = upsample_decision(rc, (h, w), eps)?;
    let selected = mask.iter().filter(|&&m| m).count();
    let weights = mask.mapv(|m| if m { T::one() } else { T::zero() });
    let LossGrad { value, grad } = masked_ce(logits, &target, &weights)?;
    Ok(SelectionLoss {
        value,
        grad,
        selected_fraction: selected as f64 / mask.len().max(1) as f64,
    })
}

/// Self-training cross-entropy weighted 2 / 1 / 0 by how many of the two
/// discriminators accept each region.
pub fn dynamic_region_loss<T: Scalar>(
    logits: &Array4<T>,
    rc1: &Array4<T>,
    rc2: &Array4<T>,
    eps: T,
) -> Result<SelectionLoss<T>> {
    check_finite(logits, "logits")?;
    let (_, _, h, w) = logits.dim();
    let target = to_prediction_label(logits);
    let combined = combine_decision_maps(rc1, rc2, eps)?;
    let weights = weight_mask(&combined, (h, w))?;
    let selected = weights.iter().filter(|&&v| v > T::zero()).count();
    let LossGrad { value, grad } = masked_ce(logits, &target, &weights)?;
    Ok(SelectionLoss {
        value,
        grad,
        selected_fraction: selected as f64 / weights.len().max(1) as f64,
    })
}

#[derive(Clone, Debug)]
pub struct FeatureMatch<T> {
    pub value: T,
    pub grad_pred: Array4<T>,
    pub grad_gt: Array4<T>,
}

fn channel_means<T: Scalar>(f: &Array4<T>) -> Array1<T> {
    let (b, _, h, w) = f.dim();
    let n = T::from_usize_lossy(b * h * w);
    f.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1)).mapv(|s| s / n)
}

/// ‖mean(f_gt) − mean(f_pred)‖₁ over channels, means taken over batch and
/// space.
pub fn feature_matching_loss<T: Scalar>(f_pred: &Array4<T>, f_gt: &Array4<T>) -> Result<FeatureMatch<T>> {
    let (bp, cp, hp, wp) = f_pred.dim();
    let (bg, cg, hg, wg) = f_gt.dim();
    if cp != cg {
        return Err(Error::Shape(format!("feature channels differ: {cp} vs {cg}")));
    }
    if bp == 0 || bg == 0 {
        return Err(Error::Shape("feature matching needs non-empty batches".into()));
    }
    let diff = channel_means(f_gt) - channel_means(f_pred);
    let value = diff.iter().map(|d| d.abs()).sum();
    let sign = diff.mapv(|d| {
        if d > T::zero() {
            T::one()
        } else if d < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    });
    let np = T::from_usize_lossy(bp * hp * wp);
    let ng = T::from_usize_lossy(bg * hg * wg);
    let grad_pred = Array4::from_shape_fn(f_pred.raw_dim(), |(_, c, _, _)| -sign[c] / np);
    let grad_gt = Array4::from_shape_fn(f_gt.raw_dim(), |(_, c, _, _)| sign[c] / ng);
    Ok(FeatureMatch {
        value,
        grad_pred,
        grad_gt,
    })
}

/// Loss value with gradients for both branches.
#[derive(Clone, Debug)]
pub struct PairLoss<T> {
    pub value: T,
    pub grad_1: Array4<T>,
    pub grad_2: Array4<T>,
}

/// CE(f1(x), y*) + CE(f2(x), y*), IGNORE excluded.
pub fn supervised_loss<T: Scalar>(logits_1: &Array4<T>, logits_2: &Array4<T>, y_star: &LabelMap) -> Result<PairLoss<T>> {
    let ones = unit_weights(logits_1);
    let a = masked_ce(logits_1, y_star, &ones)?;
    let b = masked_ce(logits_2, y_star, &ones)?;
    Ok(PairLoss {
        value: a.value + b.value,
        grad_1: a.grad,
        grad_2: b.grad,
    })
}

/// Cross pseudo supervision: each branch learns the other's argmax.
pub fn cps_loss<T: Scalar>(logits_1: &Array4<T>, logits_2: &Array4<T>) -> Result<PairLoss<T>> {
    if logits_1.dim() != logits_2.dim() {
        return Err(Error::Shape(format!(
            "branch logits differ: {:?} vs {:?}",
            logits_1.dim(),
            logits_2.dim()
        )));
    }
    check_finite(logits_1, "branch 1 logits")?;
    check_finite(logits_2, "branch 2 logits")?;
    let ones = unit_weights(logits_1);
    let a = masked_ce(logits_1, &to_prediction_label(logits_2), &ones)?;
    let b = masked_ce(logits_2, &to_prediction_label(logits_1), &ones)?;
    Ok(PairLoss {
        value: a.value + b.value,
        grad_1: a.grad,
        grad_2: b.grad,
    })
}

/// The individual objective terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub sup: f64,
    pub cps: f64,
    /// L_ls, or L_dr when region-loss correction is enabled.
    pub ls_or_dr: f64,
    pub fm: f64,
}

/// L = L_sup + λ1·L_cps + λ2·(L_ls | L_dr) + λ3·L_f.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("sup", parts.sup),
        ("cps", parts.cps),
        ("ls_or_dr", parts.ls_or_dr),
        ("fm", parts.fm),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term '{name}' is {v}")));
        }
    }
    Ok(parts.sup + w.lambda_cps * parts.cps + w.lambda_select * parts.ls_or_dr + w.lambda_fm * parts.fm)
}

const SCORE_CLAMP: f64 = 1e-7;

/// Binary cross-entropy −mean(ln s_real) − mean(ln(1 − s_fake)), scores
/// clamped to [1e-7, 1 − 1e-7].
pub fn discriminator_loss<T: Scalar>(s_real: &[T], s_fake: &[T]) -> T {
    let lo = T::lit(SCORE_CLAMP);
    let hi = T::one() - lo;
    let mean = |xs: &[T], f: &dyn Fn(T) -> T| {
        if xs.is_empty() {
            T::zero()
        } else {
            xs.iter().map(|&s| f(s.max(lo).min(hi))).sum::<T>() / T::from_usize_lossy(xs.len())
        }
    };
    -mean(s_real, &|s| s.ln()) - mean(s_fake, &|s| (T::one() - s).ln())
}

/// Discriminator objective on region logits: the BCE of the pooled score and
/// the BCE of every region cell, averaged. `real` and `fake` are (N, 1, h, w)
/// pre-sigmoid maps; returns the value and gradients w.r.t. both maps.
pub fn discriminator_region_loss<T: Scalar>(real: &Array4<T>, fake: &Array4<T>) -> (T, Array4<T>, Array4<T>) {
    let half = T::lit(0.5);
    let (pooled_real, _) = crate::models::pooled_scores(real);
    let (pooled_fake, _) = crate::models::pooled_scores(fake);
    let pooled_value = discriminator_loss(
        pooled_real.mapv(sigmoid).as_slice().expect("contiguous"),
        pooled_fake.mapv(sigmoid).as_slice().expect("contiguous"),
    );
    let cell_real: Vec<T> = real.iter().map(|&v| sigmoid(v)).collect();
    let cell_fake: Vec<T> = fake.iter().map(|&v| sigmoid(v)).collect();
    let cell_value = discriminator_loss(&cell_real, &cell_fake);
    let value = half * (pooled_value + cell_value);

    // d/dx −ln σ(x) = σ(x) − 1, d/dx −ln(1 − σ(x)) = σ(x)
    let grad = |map: &Array4<T>, pooled: &Array1<T>, is_real: bool| {
        let (n, _, h, w) = map.dim();
        let cells = T::from_usize_lossy(map.len().max(1));
        let per_image = T::from_usize_lossy(h * w);
        let batch = T::from_usize_lossy(n.max(1));
        let shift = if is_real { T::one() } else { T::zero() };
        Array4::from_shape_fn(map.raw_dim(), |(i, c, y, x)| {
            let cell = (sigmoid(map[[i, c, y, x]]) - shift) / cells;
            let pooled = (sigmoid(pooled[i]) - shift) / batch / per_image;
            half * (cell + pooled)
        })
    };
    (value, grad(real, &pooled_real, true), grad(fake, &pooled_fake, false))
}
