//! Samples, synthetic scenes, on-disk datasets, partitions and augmentation.

mod augment;
mod loader;
mod partition;
mod synthetic;

pub use augment::{augment, AugmentationConfig};
pub use loader::{load_dataset, load_dataset_checked, validate_labels};
pub use partition::{make_partition, LabelRatio, Partition};
pub use synthetic::{generate_synthetic_scene, synthetic_split, SHAPE_NOISE_STD};

use ndarray::{Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// (B, H, W) integer class map; [`IGNORE`] marks unlabeled pixels.
pub type LabelMap = Array3<u8>;

/// One image with its class mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// (H, W, 3), values in [0, 1].
    pub image: Array3<f32>,
    /// (H, W), values in {0..C-1} ∪ {IGNORE}.
    pub label: Array2<u8>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Array3<f32>, label: Array2<u8>) -> Result<Self> {
        let id = id.into();
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("sample {id}: image must have 3 channels, got {c}")));
        }
        if label.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "sample {id}: image is {h}x{w} but label is {:?}",
                label.dim()
            )));
        }
        Ok(Sample { id, image, label })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Stacks equally sized samples into an (N, 3, H, W) tensor.
pub fn images_to_tensor<T: Scalar>(samples: &[&Sample]) -> Result<Array4<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Shape("cannot batch zero samples".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut out = Array4::<T>::zeros((samples.len(), 3, h, w));
    for (i, s) in samples.iter().enumerate() {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes sizes {h}x{w} and {}x{} ({})",
                s.height(),
                s.width(),
                s.id
            )));
        }
        let chw = s.image.view().permuted_axes([2, 0, 1]);
        out.index_axis_mut(Axis(0), i).assign(&chw.mapv(|v| T::lit(v as f64)));
    }
    Ok(out)
}

pub fn labels_to_map(samples: &[&Sample]) -> Result<LabelMap> {
    let views: Vec<_> = samples.iter().map(|s| s.label.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(format!("label batch: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatched_label_is_rejected() {
        let err = Sample::new("a", Array3::zeros((4, 4, 3)), Array2::zeros((4, 5))).unwrap_err();
        assert!(err.to_string().contains("label"));
    }

    #[test]
    fn batching_transposes_to_channel_first() {
        let mut img = Array3::<f32>::zeros((2, 2, 3));
        img[[1, 0, 2]] = 0.5;
        let s = Sample::new("x", img, Array2::zeros((2, 2))).unwrap();
        let t = images_to_tensor::<f64>(&[&s, &s]).unwrap();
        assert_eq!(t.dim(), (2, 3, 2, 2));
        assert_eq!(t[[1, 2, 1, 0]], 0.5);
        assert_eq!(labels_to_map(&[&s]).unwrap().dim(), (1, 2, 2));
    }
}
