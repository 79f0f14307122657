//! Full training runs: data preparation, batch sampling, logging,
//! checkpointing, resume and final evaluation.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, RunConfig, SeedStream};
use crate::data::{
    augment, images_to_tensor, labels_to_map, load_dataset_checked, make_partition, synthetic_split, Partition,
    Sample,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::scalar::Scalar;
use crate::trainer::{load_checkpoint, save_checkpoint, train_step, Batch, MicroBatch, StepConfig, TrainState};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EVAL_FILE: &str = "eval.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const PARTITION_DIR: &str = "partition";
pub const STATE_DUMP_FILE: &str = "state_dump.json";

/// Offset between synthetic train and validation scene seeds.
pub const SYNTHETIC_VAL_OFFSET: u64 = 1_000_000;

pub struct Datasets {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let c = cfg.model.num_classes;
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            num_train,
            num_val,
            height,
            width,
            seed,
        } => Ok(Datasets {
            train: synthetic_split(*seed, *num_train, (*height, *width), c)?,
            val: synthetic_split(seed + SYNTHETIC_VAL_OFFSET, *num_val, (*height, *width), c)?,
        }),
        DatasetSpec::Directory { train_root, val_root } => {
            let train = load_dataset_checked(train_root, c)?;
            let val = load_dataset_checked(val_root, c)?;
            if train.is_empty() || val.is_empty() {
                return Err(Error::Dataset("training and validation sets must be non-empty".into()));
            }
            Ok(Datasets { train, val })
        }
    }
}

pub fn partition_for(cfg: &RunConfig, train: &[Sample]) -> Result<Partition> {
    let ids: Vec<String> = train.iter().map(|s| s.id.clone()).collect();
    make_partition(&ids, cfg.partition.ratio, cfg.derive_seed(SeedStream::Partition))
}

/// Labeled and unlabeled sample pools of a partition.
pub struct Pools<'a> {
    pub labeled: Vec<&'a Sample>,
    pub unlabeled: Vec<&'a Sample>,
}

impl<'a> Pools<'a> {
    pub fn new(train: &'a [Sample], p: &Partition) -> Result<Self> {
        let by_id: HashMap<&str, &Sample> = train.iter().map(|s| (s.id.as_str(), s)).collect();
        let pick = |ids: &[String]| -> Result<Vec<&'a Sample>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::Dataset(format!("partition names unknown sample '{id}'")))
                })
                .collect()
        };
        Ok(Pools {
            labeled: pick(&p.labeled_ids)?,
            unlabeled: pick(&p.unlabeled_ids)?,
        })
    }
}

fn draw_batch<T: Scalar, R: Rng>(
    pool: &[&Sample],
    n: usize,
    cfg: &RunConfig,
    rng: &mut R,
    labeled: bool,
) -> Result<Batch<T>> {
    let (h, w) = cfg.augment.crop_size;
    if pool.is_empty() || n == 0 {
        return Ok(Batch {
            images: Array4::zeros((0, 3, h, w)),
            labels: None,
        });
    }
    let samples: Vec<Sample> = (0..n)
        .map(|_| augment(pool[rng.gen_range(0..pool.len())], &cfg.augment, rng))
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    Ok(Batch {
        images: images_to_tensor(&refs)?,
        labels: if labeled { Some(labels_to_map(&refs)?) } else { None },
    })
}

/// Draws the micro-batches of the next iteration from the state's RNG.
pub fn sample_iteration<T: Scalar>(state: &mut TrainState<T>, pools: &Pools, cfg: &RunConfig) -> Result<Vec<MicroBatch<T>>> {
    let t = &cfg.train;
    (0..t.accumulation_steps)
        .map(|_| {
            Ok(MicroBatch {
                labeled: draw_batch(&pools.labeled, t.batch_size_labeled, cfg, &mut state.rng, true)?,
                unlabeled: draw_batch(&pools.unlabeled, t.batch_size_unlabeled, cfg, &mut state.rng, false)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub iteration: usize,
    pub miou_branch1: f64,
    pub miou_ensemble: f64,
}

/// Contents of `eval.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub config_hash: String,
    pub iteration: usize,
    /// Score under the configured inference mode.
    pub miou: f64,
    pub eni: bool,
    pub branch1: EvalReport,
    pub ensemble: EvalReport,
}

impl FinalEval {
    pub fn miou_for(&self, eni: bool) -> f64 {
        if eni {
            self.ensemble.miou
        } else {
            self.branch1.miou
        }
    }
}

pub fn evaluate_both<T: Scalar>(state: &TrainState<T>, cfg: &RunConfig, val: &[Sample]) -> Result<FinalEval> {
    let branch1 = evaluate(&state.nets.branches, val, false, &cfg.ensemble)?;
    let ensemble = evaluate(&state.nets.branches, val, true, &cfg.ensemble)?;
    Ok(FinalEval {
        config_hash: cfg.config_hash(),
        iteration: state.iteration,
        miou: if cfg.toggles.eni { ensemble.miou } else { branch1.miou },
        eni: cfg.toggles.eni,
        branch1,
        ensemble,
    })
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many iterations are complete.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub iterations: usize,
    /// `None` when the run stopped early.
    pub eval: Option<FinalEval>,
}

/// Keeps the records of `path` whose iteration satisfies `keep`.
fn truncate_jsonl(path: &Path, keep: impl Fn(usize) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    #[derive(Deserialize)]
    struct Iter {
        iteration: usize,
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Iter = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if keep(rec.iteration) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn append_writer(path: &Path, fresh: bool) -> Result<BufWriter<File>> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(file))
}

fn write_line<W: Write, S: Serialize>(w: &mut W, rec: &S, path: &Path) -> Result<()> {
    let line = serde_json::to_string(rec).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains to `cfg.train.max_iters` inside `out_dir`.
pub fn run_training<T: Scalar>(cfg: &RunConfig, out_dir: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let data = load_datasets(cfg)?;
    let partition = partition_for(cfg, &data.train)?;
    let pools = Pools::new(&data.train, &partition)?;
    let step_cfg = StepConfig::from(cfg);

    let mut state = match &opts.resume {
        Some(path) => load_checkpoint::<T>(path, cfg)?,
        None => TrainState::new(cfg),
    };
    let fresh = opts.resume.is_none();
    let metrics_path = out_dir.join(METRICS_FILE);
    let val_path = out_dir.join(VAL_FILE);
    if !fresh {
        let done = state.iteration;
        truncate_jsonl(&metrics_path, |it| it < done)?;
        truncate_jsonl(&val_path, |it| it <= done)?;
    }
    std::fs::write(out_dir.join(CONFIG_FILE), cfg.to_toml_string()).map_err(|e| Error::io(out_dir, e))?;
    partition.write(&out_dir.join(PARTITION_DIR))?;

    let mut metrics = append_writer(&metrics_path, fresh)?;
    let mut val_log = append_writer(&val_path, fresh)?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let max = cfg.train.max_iters;
    let stop = opts.stop_after.unwrap_or(max).min(max);
    let progress_every = (max / 10).max(1);

    while state.iteration < stop {
        let micro = sample_iteration(&mut state, &pools, cfg)?;
        let report = match train_step(&mut state, &micro, &step_cfg) {
            Ok(r) => r,
            Err(e @ Error::Numeric(_)) => {
                let _ = metrics.flush();
                let dump = out_dir.join(STATE_DUMP_FILE);
                save_checkpoint(&state, cfg, &dump)?;
                log::error!("aborting at iteration {}: {e}; state written to {}", state.iteration, dump.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        write_line(&mut metrics, &report, &metrics_path)?;
        let done = state.iteration;
        if done % progress_every == 0 {
            log::info!(
                "iter {done}/{max} total {:.4} sup {:.4} cps {:.4} ls/dr {:.4} fm {:.4}",
                report.total,
                report.sup,
                report.cps,
                report.ls_or_dr,
                report.fm
            );
        }
        if cfg.train.eval_every > 0 && done % cfg.train.eval_every == 0 && done < max {
            let ev = evaluate_both(&state, cfg, &data.val)?;
            let rec = ValRecord {
                iteration: done,
                miou_branch1: ev.branch1.miou,
                miou_ensemble: ev.ensemble.miou,
            };
            write_line(&mut val_log, &rec, &val_path)?;
        }
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && done < stop {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            val_log.flush().map_err(|e| Error::io(&val_path, e))?;
            save_checkpoint(&state, cfg, &ckpt_path)?;
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    save_checkpoint(&state, cfg, &ckpt_path)?;

    if state.iteration < max {
        val_log.flush().map_err(|e| Error::io(&val_path, e))?;
        return Ok(RunOutcome {
            iterations: state.iteration,
            eval: None,
        });
    }
    let ev = evaluate_both(&state, cfg, &data.val)?;
    write_line(
        &mut val_log,
        &ValRecord {
            iteration: state.iteration,
            miou_branch1: ev.branch1.miou,
            miou_ensemble: ev.ensemble.miou,
        },
        &val_path,
    )?;
    val_log.flush().map_err(|e| Error::io(&val_path, e))?;
    write_json(&out_dir.join(EVAL_FILE), &ev)?;
    log::info!("final val mIoU {:.4} (eni {})", ev.miou, ev.eni);
    Ok(RunOutcome {
        iterations: state.iteration,
        eval: Some(ev),
    })
}

/// Evaluates a checkpoint on the validation split.
pub fn evaluate_checkpoint<T: Scalar>(cfg: &RunConfig, ckpt: &Path, eni: bool) -> Result<EvalReport> {
    cfg.validate()?;
    let state = load_checkpoint::<T>(ckpt, cfg)?;
    let data = load_datasets(cfg)?;
    evaluate(&state.nets.branches, &data.val, eni, &cfg.ensemble)
}

/// Reads every record of a JSONL log.
pub fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
        })
        .collect()
}
