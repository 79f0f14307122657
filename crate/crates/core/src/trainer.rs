//! One training iteration: discriminator update, then a joint update of both
//! segmentation branches on the full objective.

use std::path::Path;

use ndarray::{concatenate, s, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SeedStream, Toggles, TrainConfig};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::losses::{
    cps_loss, discriminator_region_loss, dynamic_region_loss, feature_matching_loss, local_selection_loss,
    supervised_loss, total_loss, LossParts, LossWeights,
};
use crate::models::{Discriminator, Networks, SegmentationBranch};
use crate::nn::ops::{softmax, softmax_backward};
use crate::nn::{Adam, Parameters, Sgd};
use crate::region_filter::{make_concat, one_hot};
use crate::scalar::Scalar;

/// Poly decay: base · (1 − it/max)^power.
pub fn lr_schedule(base_lr: f64, iteration: usize, max_iters: usize, power: f64) -> f64 {
    let t = (iteration.min(max_iters) as f64) / max_iters.max(1) as f64;
    base_lr * (1.0 - t).powf(power)
}

/// Images (N, 3, H, W) with labels (N, H, W). Unlabeled batches carry no
/// labels.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Array4<T>,
    pub labels: Option<LabelMap>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One labeled and one (possibly empty) unlabeled micro-batch.
#[derive(Clone, Debug)]
pub struct MicroBatch<T> {
    pub labeled: Batch<T>,
    pub unlabeled: Batch<T>,
}

/// Everything `train_step` reads from the configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepConfig {
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub toggles: Toggles,
}

impl From<&RunConfig> for StepConfig {
    fn from(c: &RunConfig) -> Self {
        StepConfig {
            train: c.train.clone(),
            loss: c.loss,
            toggles: c.toggles,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct TrainState<T> {
    /// Number of completed iterations.
    pub iteration: usize,
    pub nets: Networks<T>,
    pub seg_opt: [Sgd<T>; 2],
    pub disc_opt: [Adam<T>; 2],
    /// Drives batch sampling and augmentation.
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &RunConfig) -> Self {
        let t = &cfg.train;
        let sgd = || Sgd::new(T::lit(t.seg_momentum), T::lit(t.seg_weight_decay));
        let adam = || Adam::new(T::lit(t.disc_betas.0), T::lit(t.disc_betas.1));
        TrainState {
            iteration: 0,
            nets: Networks::new(&cfg.model, cfg.derive_seed(SeedStream::Model)),
            seg_opt: [sgd(), sgd()],
            disc_opt: [adam(), adam()],
            rng: ChaCha8Rng::seed_from_u64(cfg.derive_seed(SeedStream::Trainer)),
        }
    }
}

/// Per-iteration record; micro-batch values are averaged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub sup: f64,
    pub cps: f64,
    pub ls_or_dr: f64,
    pub fm: f64,
    pub total: f64,
    pub selected_fraction: f64,
    /// Discriminator objective (0 when discriminators are off).
    pub disc: f64,
    pub lr: f64,
}

impl LossReport {
    pub fn parts(&self) -> LossParts {
        LossParts {
            sup: self.sup,
            cps: self.cps,
            ls_or_dr: self.ls_or_dr,
            fm: self.fm,
        }
    }
}

fn probability_rows<T: Scalar>(x: &Array4<T>, from: usize) -> Array4<T> {
    x.slice(s![from.., .., .., ..]).to_owned()
}

fn check_micro_batch<T: Scalar>(mb: &MicroBatch<T>, num_classes: usize) -> Result<()> {
    let l = &mb.labeled;
    if l.is_empty() {
        return Err(Error::Shape("labeled batch is empty".into()));
    }
    let labels = l
        .labels
        .as_ref()
        .ok_or_else(|| Error::Shape("labeled batch has no labels".into()))?;
    let (n, _, h, w) = l.images.dim();
    if labels.dim() != (n, h, w) {
        return Err(Error::Shape(format!("labels {:?} vs images {:?}", labels.dim(), l.images.dim())));
    }
    if let Some(&bad) = labels.iter().find(|&&v| v != crate::data::IGNORE && v as usize >= num_classes) {
        return Err(Error::Dataset(format!("label {bad} out of range for {num_classes} classes")));
    }
    if !mb.unlabeled.is_empty() && mb.unlabeled.images.shape()[1..] != l.images.shape()[1..] {
        return Err(Error::Shape(format!(
            "labeled {:?} and unlabeled {:?} batches differ in size",
            l.images.dim(),
            mb.unlabeled.images.dim()
        )));
    }
    Ok(())
}

struct Forward<T> {
    logits: [Array4<T>; 2],
    caches: [crate::models::BranchCache<T>; 2],
    nl: usize,
}

fn forward_branches<T: Scalar>(branches: &[SegmentationBranch<T>; 2], mb: &MicroBatch<T>) -> Forward<T> {
    let images = if mb.unlabeled.is_empty() {
        mb.labeled.images.clone()
    } else {
        concatenate(Axis(0), &[mb.labeled.images.view(), mb.unlabeled.images.view()]).expect("checked sizes")
    };
    let (l1, c1) = branches[0].forward(&images);
    let (l2, c2) = branches[1].forward(&images);
    Forward {
        logits: [l1, l2],
        caches: [c1, c2],
        nl: mb.labeled.len(),
    }
}

/// Gradients of the discriminator objective for both discriminators, summed
/// into `grads`. Returns the mean objective over the two.
fn discriminator_phase<T: Scalar>(
    discs: &[Discriminator<T>; 2],
    mb: &MicroBatch<T>,
    fwd: &Forward<T>,
    grads: &mut [Discriminator<T>; 2],
) -> Result<f64> {
    let num_classes = fwd.logits[0].shape()[1];
    let labels = mb.labeled.labels.as_ref().expect("checked");
    let concat_g = make_concat(&mb.labeled.images, &one_hot::<T>(labels, num_classes))?;
    let mut total = 0.0;
    for i in 0..2 {
        // predictions enter as constants: nothing flows back to the branches
        let probs = softmax(&probability_rows(&fwd.logits[i], fwd.nl));
        let concat_p = make_concat(&mb.unlabeled.images, &probs)?;
        let both = concatenate(Axis(0), &[concat_g.view(), concat_p.view()]).expect("same size");
        let (out, cache) = discs[i].forward(&both)?;
        let nr = concat_g.shape()[0];
        let real = out.rc_logits.slice(s![..nr, .., .., ..]).to_owned();
        let fake = out.rc_logits.slice(s![nr.., .., .., ..]).to_owned();
        let (value, g_real, g_fake) = discriminator_region_loss(&real, &fake);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("discriminator {} loss is {value}", i + 1)));
        }
        let d = concatenate(Axis(0), &[g_real.view(), g_fake.view()]).expect("same size");
        discs[i].backward(&cache, Some(&d), None, Some(&mut grads[i]), false);
        total += value.as_f64();
    }
    Ok(total / 2.0)
}

struct SegOutcome {
    parts: LossParts,
    selected_fraction: f64,
}

/// Segmentation gradients for one micro-batch, accumulated into `grads`.
fn segmentation_phase<T: Scalar>(
    nets: &Networks<T>,
    mb: &MicroBatch<T>,
    fwd: &Forward<T>,
    cfg: &StepConfig,
    in_warmup: bool,
    grads: &mut [SegmentationBranch<T>; 2],
) -> Result<SegOutcome> {
    let w = &cfg.loss;
    let nl = fwd.nl;
    let labels = mb.labeled.labels.as_ref().expect("checked");
    let lab = |x: &Array4<T>| x.slice(s![..nl, .., .., ..]).to_owned();

    let sup = supervised_loss(&lab(&fwd.logits[0]), &lab(&fwd.logits[1]), labels)?;
    let cps = cps_loss(&fwd.logits[0], &fwd.logits[1])?;

    let mut dlogits = [
        cps.grad_1.mapv(|g| g * T::lit(w.lambda_cps)),
        cps.grad_2.mapv(|g| g * T::lit(w.lambda_cps)),
    ];
    for (d, g) in dlogits.iter_mut().zip([&sup.grad_1, &sup.grad_2]) {
        let mut rows = d.slice_mut(s![..nl, .., .., ..]);
        rows += g;
    }

    let mut parts = LossParts {
        sup: sup.value.as_f64(),
        cps: cps.value.as_f64(),
        ls_or_dr: 0.0,
        fm: 0.0,
    };
    let mut selected = 0.0;

    let filtering = cfg.toggles.discriminators_active() && !mb.unlabeled.is_empty();
    if filtering {
        let eps = T::lit(w.epsilon);
        let num_classes = fwd.logits[0].shape()[1];
        let concat_g = make_concat(&mb.labeled.images, &one_hot::<T>(labels, num_classes))?;
        for i in 0..2 {
            let logits_u = probability_rows(&fwd.logits[i], nl);
            let probs = softmax(&logits_u);
            let concat_p = make_concat(&mb.unlabeled.images, &probs)?;
            let disc = &nets.discriminators[i];
            let (out_p, cache_p) = disc.forward(&concat_p)?;
            let mut d_logits_u = Array4::<T>::zeros(logits_u.raw_dim());

            if !in_warmup && w.lambda_select > 0.0 {
                let sel = if cfg.toggles.drlc {
                    let other = &nets.discriminators[1 - i];
                    let (out_o, _) = other.forward(&concat_p)?;
                    let (rc1, rc2) = if i == 0 { (&out_p.rc, &out_o.rc) } else { (&out_o.rc, &out_p.rc) };
                    dynamic_region_loss(&logits_u, rc1, rc2, eps)?
                } else {
                    local_selection_loss(&logits_u, &out_p.rc, eps)?
                };
                parts.ls_or_dr += sel.value.as_f64();
                selected += sel.selected_fraction / 2.0;
                d_logits_u.scaled_add(T::lit(w.lambda_select), &sel.grad);
            }

            if w.lambda_fm > 0.0 {
                let (out_g, _) = disc.forward(&concat_g)?;
                let fm = feature_matching_loss(&out_p.features, &out_g.features)?;
                parts.fm += fm.value.as_f64();
                let d_feat = fm.grad_pred.mapv(|g| g * T::lit(w.lambda_fm));
                let d_concat = disc
                    .backward(&cache_p, None, Some(&d_feat), None, true)
                    .expect("input gradient requested");
                let d_probs = d_concat.slice(s![.., 3.., .., ..]).to_owned();
                d_logits_u += &softmax_backward(&probs, &d_probs);
            }

            let mut rows = dlogits[i].slice_mut(s![nl.., .., .., ..]);
            rows += &d_logits_u;
        }
    }

    for i in 0..2 {
        nets.branches[i].backward(&fwd.caches[i], &dlogits[i], &mut grads[i]);
    }
    Ok(SegOutcome {
        parts,
        selected_fraction: selected,
    })
}

/// Performs one parameter update from `micro` (gradients averaged over the
/// micro-batches). On error the state is left untouched.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    micro: &[MicroBatch<T>],
    cfg: &StepConfig,
) -> Result<LossReport> {
    if micro.is_empty() {
        return Err(Error::Config("train_step needs at least one micro-batch".into()));
    }
    let num_classes = state.nets.branches[0].num_classes();
    for mb in micro {
        check_micro_batch(mb, num_classes)?;
        if mb.unlabeled.is_empty()
            && cfg.toggles.discriminators_active()
            && cfg.loss.lambda_select + cfg.loss.lambda_fm > 0.0
        {
            return Err(Error::Config(
                "unlabeled batch is empty while lambda2 + lambda3 > 0 with filtering enabled".into(),
            ));
        }
    }
    let k = T::from_usize_lossy(micro.len());
    let iteration = state.iteration;
    let in_warmup = iteration < cfg.train.warmup();

    let forwards: Vec<Forward<T>> = micro.iter().map(|mb| forward_branches(&state.nets.branches, mb)).collect();

    let mut discs = state.nets.discriminators.clone();
    let mut disc_opt = state.disc_opt.clone();
    let mut disc_value = 0.0;
    if cfg.toggles.discriminators_active() {
        let mut grads = [discs[0].zeros_like(), discs[1].zeros_like()];
        for (mb, fwd) in micro.iter().zip(&forwards) {
            if !mb.unlabeled.is_empty() {
                disc_value += discriminator_phase(&discs, mb, fwd, &mut grads)?;
            }
        }
        let lr = T::lit(cfg.train.disc_lr);
        for i in 0..2 {
            grads[i].scale(T::one() / k);
            disc_opt[i].step(&mut discs[i], &grads[i], lr);
        }
        disc_value /= micro.len() as f64;
    }

    let frozen = Networks {
        branches: state.nets.branches.clone(),
        discriminators: discs,
    };
    let mut grads = [frozen.branches[0].zeros_like(), frozen.branches[1].zeros_like()];
    let mut parts = LossParts::default();
    let mut selected = 0.0;
    for (mb, fwd) in micro.iter().zip(&forwards) {
        let out = segmentation_phase(&frozen, mb, fwd, cfg, in_warmup, &mut grads)?;
        parts.sup += out.parts.sup;
        parts.cps += out.parts.cps;
        parts.ls_or_dr += out.parts.ls_or_dr;
        parts.fm += out.parts.fm;
        selected += out.selected_fraction;
    }
    let kf = micro.len() as f64;
    parts = LossParts {
        sup: parts.sup / kf,
        cps: parts.cps / kf,
        ls_or_dr: parts.ls_or_dr / kf,
        fm: parts.fm / kf,
    };
    let weights = if in_warmup {
        LossWeights {
            lambda_select: 0.0,
            ..cfg.loss
        }
    } else {
        cfg.loss
    };
    let total = total_loss(&parts, &weights)?;
    if !disc_value.is_finite() {
        return Err(Error::Numeric(format!("discriminator loss is {disc_value}")));
    }

    let lr = lr_schedule(cfg.train.seg_lr, iteration, cfg.train.max_iters, cfg.train.poly_power);
    let Networks {
        mut branches,
        discriminators,
    } = frozen;
    let mut seg_opt = state.seg_opt.clone();
    for i in 0..2 {
        grads[i].scale(T::one() / k);
        seg_opt[i].step(&mut branches[i], &grads[i], T::lit(lr));
    }
    if branches
        .iter()
        .any(|b| b.param_slices().iter().any(|s| s.iter().any(|v| !v.is_finite())))
    {
        return Err(Error::Numeric(format!("non-finite branch parameter after iteration {iteration}")));
    }

    state.nets = Networks {
        branches,
        discriminators,
    };
    state.seg_opt = seg_opt;
    state.disc_opt = disc_opt;
    state.iteration += 1;
    Ok(LossReport {
        iteration,
        sup: parts.sup,
        cps: parts.cps,
        ls_or_dr: parts.ls_or_dr,
        fm: parts.fm,
        total,
        selected_fraction: selected / kf,
        disc: disc_value,
        lr,
    })
}

/// On-disk training state guarded by the hash of the configuration that
/// produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Checkpoint<T> {
    pub config_hash: String,
    pub scalar: String,
    pub state: TrainState<T>,
}

fn scalar_name<T: Scalar>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

/// Writes the checkpoint to a temporary sibling and renames it into place.
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, cfg: &RunConfig, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        config_hash: cfg.config_hash(),
        scalar: scalar_name::<T>().to_string(),
        state: state.clone(),
    };
    let text = serde_json::to_string(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a checkpoint, refusing one written under a different configuration.
pub fn load_checkpoint<T: Scalar>(path: &Path, cfg: &RunConfig) -> Result<TrainState<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint<T> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if ckpt.scalar != scalar_name::<T>() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, expected {}",
            ckpt.scalar,
            scalar_name::<T>()
        )));
    }
    let want = cfg.config_hash();
    if ckpt.config_hash != want {
        return Err(Error::Checkpoint(format!(
            "checkpoint config hash {} does not match current config {want}",
            ckpt.config_hash
        )));
    }
    Ok(ckpt.state)
}
