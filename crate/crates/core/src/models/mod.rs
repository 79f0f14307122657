//! The two segmentation branches and their per-branch discriminators.

mod branch;
mod discriminator;

pub use branch::{BranchCache, SegmentationBranch, BRANCH_STRIDE};
pub use discriminator::{
    pooled_scores, Discriminator, DiscriminatorCache, DiscriminatorOutput, FEATURE_LAYER, LEAKY_SLOPE,
    REGION_STRIDE,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub branch_width: usize,
    pub disc_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 3,
            branch_width: 8,
            disc_width: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "model.num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.num_classes > 255 {
            return Err(Error::Config("model.num_classes must be <= 255".into()));
        }
        if self.branch_width == 0 || self.disc_width == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }
}

/// θ1, θ2, φ1, φ2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Networks<T> {
    pub branches: [SegmentationBranch<T>; 2],
    pub discriminators: [Discriminator<T>; 2],
}

impl<T: Scalar> Networks<T> {
    /// Four independent initialisations derived from one seed.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let derive = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        let branch = |k| SegmentationBranch::new(derive(k), cfg.branch_width, cfg.num_classes);
        let disc = |k| Discriminator::new(derive(k), 3 + cfg.num_classes, cfg.disc_width);
        Networks {
            branches: [branch(1), branch(2)],
            discriminators: [disc(3), disc(4)],
        }
    }
}
