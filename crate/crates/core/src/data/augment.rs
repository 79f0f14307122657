use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, IGNORE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Output (height, width).
    pub crop_size: (usize, usize),
    pub hflip_prob: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            crop_size: (64, 64),
            hflip_prob: 0.5,
            scale_range: (0.75, 1.25),
        }
    }
}

impl AugmentationConfig {
    pub fn identity(h: usize, w: usize) -> Self {
        AugmentationConfig {
            crop_size: (h, w),
            hflip_prob: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "augment.scale_range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!(
                "augment.hflip_prob must lie in [0, 1], got {}",
                self.hflip_prob
            )));
        }
        if self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            return Err(Error::Config("augment.crop_size must be positive".into()));
        }
        Ok(())
    }
}

/// Random rescale, horizontal flip and crop applied identically to image and
/// label. Both use nearest-neighbour sampling, so every output pixel copies
/// one source pixel (or padding: 0 for the image, IGNORE for the label).
pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentationConfig, rng: &mut R) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let (lo, hi) = cfg.scale_range;
    let scale = lo + (hi - lo) * rng.gen::<f64>();
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    let flip = rng.gen::<f64>() < cfg.hflip_prob;

    let (ch, cw) = cfg.crop_size;
    let off_y = if sh > ch { rng.gen_range(0..=sh - ch) } else { 0 };
    let off_x = if sw > cw { rng.gen_range(0..=sw - cw) } else { 0 };

    let mut image = Array3::<f32>::zeros((ch, cw, 3));
    let mut label = Array2::<u8>::from_elem((ch, cw), IGNORE);
    for oy in 0..ch {
        let ry = oy + off_y;
        if ry >= sh {
            continue;
        }
        let sy = (ry * h / sh).min(h - 1);
        for ox in 0..cw {
            let rx = ox + off_x;
            if rx >= sw {
                continue;
            }
            let rx = if flip { sw - 1 - rx } else { rx };
            let sx = (rx * w / sw).min(w - 1);
            for c in 0..3 {
                image[[oy, ox, c]] = sample.image[[sy, sx, c]];
            }
            label[[oy, ox]] = sample.label[[sy, sx]];
        }
    }
    Sample {
        id: sample.id.clone(),
        image,
        label,
    }
}
