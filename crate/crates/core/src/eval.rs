//! Confusion-matrix mIoU and two-branch ensembling inference.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, labels_to_map, LabelMap, Sample, IGNORE};
use crate::error::{Error, Result};
use crate::models::SegmentationBranch;
use crate::nn::ops::softmax;
use crate::region_filter::to_prediction_label;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub w1: f64,
    pub w2: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { w1: 0.5, w2: 0.5 }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w1 < 0.0 || self.w2 < 0.0 || (self.w1 + self.w2 - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "ensemble weights must be non-negative and sum to 1, got {} + {}",
                self.w1, self.w2
            )));
        }
        Ok(())
    }
}

/// Weighted average of the two probability maps and its argmax.
pub fn ensemble_predict<T: Scalar>(
    probs1: &Array4<T>,
    probs2: &Array4<T>,
    w: &EnsembleConfig,
) -> Result<(Array4<T>, LabelMap)> {
    w.validate()?;
    if probs1.dim() != probs2.dim() {
        return Err(Error::Shape(format!(
            "branch probabilities differ: {:?} vs {:?}",
            probs1.dim(),
            probs2.dim()
        )));
    }
    let avg = probs1 * T::lit(w.w1) + probs2 * T::lit(w.w2);
    let r = to_prediction_label(&avg);
    Ok((avg, r))
}

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Tallies every pixel whose ground truth is not IGNORE.
    pub fn update(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
        }
        let c = self.num_classes();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::Eval(format!(
                    "class out of range (gt {g}, pred {p}) for {c} classes"
                )));
            }
            self.counts[[g as usize, p as usize]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }

    /// (class, IoU) for every class with a non-empty union.
    pub fn per_class_iou(&self) -> Vec<ClassIou> {
        let c = self.num_classes();
        (0..c)
            .filter_map(|k| {
                let tp = self.counts[[k, k]];
                let union = self.counts.row(k).sum() + self.counts.column(k).sum() - tp;
                (union > 0).then(|| ClassIou {
                    class: k,
                    iou: tp as f64 / union as f64,
                })
            })
            .collect()
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.counts.diag().sum() as f64 / total as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: usize,
    pub iou: f64,
}

/// Mean IoU over classes present in prediction or ground truth.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let per_class = cm.per_class_iou();
    if per_class.is_empty() {
        return Err(Error::Eval("mIoU undefined: every class has an empty union".into()));
    }
    Ok(per_class.iter().map(|c| c.iou).sum::<f64>() / per_class.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class_iou: Vec<ClassIou>,
    pub pixel_accuracy: f64,
    pub eni: bool,
    pub num_images: usize,
}

const EVAL_BATCH: usize = 8;

/// Predicted labels for a batch: branch 1 alone, or the ensemble.
pub fn predict_labels<T: Scalar>(
    branches: &[SegmentationBranch<T>; 2],
    images: &Array4<T>,
    eni: bool,
    w: &EnsembleConfig,
) -> Result<LabelMap> {
    let p1 = softmax(&branches[0].predict(images));
    if !eni {
        return Ok(to_prediction_label(&p1));
    }
    let p2 = softmax(&branches[1].predict(images));
    Ok(ensemble_predict(&p1, &p2, w)?.1)
}

/// Confusion matrix over a dataset. Samples are batched in groups of equal
/// size.
pub fn confusion_over<T: Scalar>(
    branches: &[SegmentationBranch<T>; 2],
    samples: &[Sample],
    eni: bool,
    w: &EnsembleConfig,
) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return Err(Error::Eval("cannot evaluate an empty dataset".into()));
    }
    let mut cm = ConfusionMatrix::new(branches[0].num_classes());
    let mut start = 0;
    while start < samples.len() {
        let size = (samples[start].height(), samples[start].width());
        let mut end = start + 1;
        while end < samples.len()
            && end - start < EVAL_BATCH
            && (samples[end].height(), samples[end].width()) == size
        {
            end += 1;
        }
        let batch: Vec<&Sample> = samples[start..end].iter().collect();
        let images = images_to_tensor::<T>(&batch)?;
        let pred = predict_labels(branches, &images, eni, w)?;
        cm.update(&pred, &labels_to_map(&batch)?)?;
        start = end;
    }
    Ok(cm)
}

/// `eni = false` scores branch 1 alone.
pub fn evaluate<T: Scalar>(
    branches: &[SegmentationBranch<T>; 2],
    samples: &[Sample],
    eni: bool,
    w: &EnsembleConfig,
) -> Result<EvalReport> {
    let cm = confusion_over(branches, samples, eni, w)?;
    Ok(EvalReport {
        miou: miou(&cm)?,
        per_class_iou: cm.per_class_iou(),
        pixel_accuracy: cm.pixel_accuracy().unwrap_or(0.0),
        eni,
        num_images: samples.len(),
    })
}
