//! Run configuration: a strict TOML document covering data, model, training,
//! losses, ablation toggles and inference.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentationConfig, LabelRatio};
use crate::error::{Error, Result};
use crate::eval::EnsembleConfig;
use crate::losses::LossWeights;
use crate::models::ModelConfig;

/// Component switches matching the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    /// Local pseudo-label filtering (discriminators, L_ls, L_f).
    pub lplf: bool,
    /// Dynamic region-loss correction (L_dr replaces L_ls).
    pub drlc: bool,
    /// Ensembling inference.
    pub eni: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::full()
    }
}

impl Toggles {
    pub const fn baseline() -> Self {
        Toggles {
            lplf: false,
            drlc: false,
            eni: false,
        }
    }

    pub const fn full() -> Self {
        Toggles {
            lplf: true,
            drlc: true,
            eni: true,
        }
    }

    /// Whether discriminators are trained and consulted.
    pub fn discriminators_active(&self) -> bool {
        self.lplf || self.drlc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub batch_size_labeled: usize,
    pub batch_size_unlabeled: usize,
    pub seg_lr: f64,
    pub seg_momentum: f64,
    pub seg_weight_decay: f64,
    pub disc_lr: f64,
    pub disc_betas: (f64, f64),
    pub poly_power: f64,
    /// Iterations with λ2 forced to 0; defaults to 5% of `max_iters`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_iters: Option<usize>,
    /// Micro-batches accumulated per parameter update.
    pub accumulation_steps: usize,
    /// 0 disables periodic checkpoints (a final one is always written).
    pub checkpoint_every: usize,
    /// 0 disables periodic validation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 1000,
            batch_size_labeled: 2,
            batch_size_unlabeled: 2,
            seg_lr: 2.5e-3,
            seg_momentum: 0.9,
            seg_weight_decay: 5e-4,
            disc_lr: 1e-4,
            disc_betas: (0.9, 0.99),
            poly_power: 0.9,
            warmup_iters: None,
            accumulation_steps: 1,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_iters.unwrap_or(self.max_iters / 20)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("train.max_iters must be positive".into()));
        }
        if self.warmup() >= self.max_iters {
            return Err(Error::Config(format!(
                "train.warmup_iters ({}) must be smaller than train.max_iters ({})",
                self.warmup(),
                self.max_iters
            )));
        }
        if self.batch_size_labeled == 0 {
            return Err(Error::Config("train.batch_size_labeled must be positive".into()));
        }
        if !(self.seg_lr > 0.0) || !(self.disc_lr > 0.0) {
            return Err(Error::Config("train learning rates must be positive".into()));
        }
        if self.accumulation_steps == 0 {
            return Err(Error::Config("train.accumulation_steps must be >= 1".into()));
        }
        let (b1, b2) = self.disc_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("train.disc_betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated scenes; train seeds start at `seed`, validation seeds at
    /// `seed + 1_000_000`.
    Synthetic {
        num_train: usize,
        num_val: usize,
        height: usize,
        width: usize,
        #[serde(default)]
        seed: u64,
    },
    /// `root/images` + `root/masks` layout for training and validation.
    Directory { train_root: PathBuf, val_root: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            num_train: 200,
            num_val: 50,
            height: 64,
            width: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub ratio: LabelRatio,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            ratio: LabelRatio::Eighth,
        }
    }
}

/// Settings only used by the ablation command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub ratios: Vec<LabelRatio>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            ratios: vec![LabelRatio::Eighth],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub augment: AugmentationConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub toggles: Toggles,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub ablation: AblationSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: default_output_dir(),
            dataset: DatasetSpec::default(),
            partition: PartitionSpec::default(),
            model: ModelConfig::default(),
            augment: AugmentationConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            toggles: Toggles::default(),
            ensemble: EnsembleConfig::default(),
            ablation: AblationSpec::default(),
        }
    }
}

/// Stream identifiers for [`RunConfig::derive_seed`].
#[derive(Clone, Copy, Debug)]
pub enum SeedStream {
    Partition,
    Model,
    Trainer,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.ensemble.validate()?;
        if self.toggles.drlc && !self.toggles.lplf {
            return Err(Error::Config(
                "toggles.drlc requires toggles.lplf (region-loss correction refines filtering)".into(),
            ));
        }
        let w = &self.loss;
        if self.toggles.discriminators_active()
            && self.train.batch_size_unlabeled == 0
            && w.lambda_select + w.lambda_fm > 0.0
        {
            return Err(Error::Config(
                "train.batch_size_unlabeled is 0 but lambda2 + lambda3 > 0 with filtering enabled".into(),
            ));
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                num_train,
                num_val,
                height,
                width,
                ..
            } => {
                if *num_train == 0 || *num_val == 0 {
                    return Err(Error::Config("dataset sizes must be positive".into()));
                }
                if *height < 16 || *width < 16 {
                    return Err(Error::Config("synthetic scenes must be at least 16x16".into()));
                }
            }
            DatasetSpec::Directory { train_root, val_root } => {
                for p in [train_root, val_root] {
                    if !p.is_dir() {
                        return Err(Error::Config(format!("dataset root {} does not exist", p.display())));
                    }
                }
            }
        }
        let (ch, cw) = self.augment.crop_size;
        if ch % 16 != 0 || cw % 16 != 0 {
            return Err(Error::Config(format!(
                "augment.crop_size {ch}x{cw} must be a multiple of 16 (discriminator region size)"
            )));
        }
        Ok(())
    }

    /// Deterministic per-purpose seed fanned out from the top-level seed.
    pub fn derive_seed(&self, stream: SeedStream) -> u64 {
        let tag = match stream {
            SeedStream::Partition => 0x5041_5254u64,
            SeedStream::Model => 0x4d4f_4445,
            SeedStream::Trainer => 0x5452_4149,
        };
        let mut x = self.seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        // splitmix64 finaliser
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^ (x >> 31)
    }

    /// Hash of everything that determines the training trajectory
    /// (excludes output location, inference weights and ablation grid).
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            seed: u64,
            dataset: &'a DatasetSpec,
            partition: &'a PartitionSpec,
            model: &'a ModelConfig,
            augment: &'a AugmentationConfig,
            train: &'a TrainConfig,
            loss: &'a LossWeights,
            toggles: Toggles,
        }
        let canonical = toml::to_string(&Hashed {
            seed: self.seed,
            dataset: &self.dataset,
            partition: &self.partition,
            model: &self.model,
            augment: &self.augment,
            train: &self.train,
            loss: &self.loss,
            toggles: Toggles {
                eni: false,
                ..self.toggles
            },
        })
        .expect("serialisable");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..12])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossProfile;

    #[test]
    fn empty_document_uses_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.warmup(), 50);
        assert_eq!(cfg.train.seg_lr, 2.5e-3);
        assert_eq!(cfg.train.seg_momentum, 0.9);
        assert_eq!(cfg.train.seg_weight_decay, 5e-4);
        assert_eq!(cfg.train.disc_lr, 1e-4);
        assert_eq!(cfg.train.disc_betas, (0.9, 0.99));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml_str("[train]\nmax_iter = 5\n").unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("max_iter"), "{err}");
        let err = RunConfig::from_toml_str("[loss]\nlambda4 = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("lambda4"), "{err}");
    }

    #[test]
    fn profiles_and_overrides() {
        let cfg = RunConfig::from_toml_str("[loss]\nprofile = \"cityscapes\"\n").unwrap();
        assert_eq!(cfg.loss, LossWeights::cityscapes());
        let cfg = RunConfig::from_toml_str("[loss]\nprofile = \"voc\"\nlambda3 = 0.0\n").unwrap();
        assert_eq!(cfg.loss.lambda_fm, 0.0);
        assert_eq!(cfg.loss.epsilon, 0.6);
        assert_eq!(cfg.loss.profile, LossProfile::Voc);
        assert!(RunConfig::from_toml_str("[loss]\nepsilon = 1.5\n").is_err());
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 17;
        cfg.toggles = Toggles::baseline();
        cfg.loss = LossWeights::cityscapes();
        cfg.train.warmup_iters = Some(3);
        cfg.partition.ratio = LabelRatio::Sixteenth;
        let text = cfg.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_combinations() {
        assert!(RunConfig::from_toml_str("[toggles]\nlplf = false\ndrlc = true\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\nbatch_size_unlabeled = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\nmax_iters = 10\nwarmup_iters = 10\n").is_err());
        assert!(RunConfig::from_toml_str("[augment]\ncrop_size = [40, 64]\n").is_err());
        assert!(RunConfig::from_toml_str("[ensemble]\nw1 = 0.5\nw2 = 0.6\n").is_err());
        assert!(RunConfig::from_toml_str("[partition]\nratio = \"1/3\"\n").is_err());
    }

    #[test]
    fn hash_tracks_model_changes_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.toggles.eni = false;
        assert_eq!(a.config_hash(), b.config_hash());
        b.model.num_classes = 4;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        let cfg = RunConfig::default();
        let s = [SeedStream::Partition, SeedStream::Model, SeedStream::Trainer].map(|k| cfg.derive_seed(k));
        assert!(s[0] != s[1] && s[1] != s[2] && s[0] != s[2]);
    }
}
