//! Component ablation: the five table rows × label ratios × seeds.
//!
//! Three trainings per (ratio, seed) cover all five rows, since ENI only
//! changes inference: the ENI rows reuse the baseline and LPLF+DRLC
//! checkpoints.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Toggles};
use crate::data::LabelRatio;
use crate::error::{Error, Result};
use crate::run::{run_training, FinalEval, RunOptions, EVAL_FILE};
use crate::scalar::Scalar;

/// Which components a training run enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Lplf,
    LplfDrlc,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Lplf, Variant::LplfDrlc];

    pub fn dir_name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Lplf => "lplf",
            Variant::LplfDrlc => "lplf_drlc",
        }
    }

    pub fn toggles(self) -> Toggles {
        match self {
            Variant::Baseline => Toggles::baseline(),
            Variant::Lplf => Toggles {
                lplf: true,
                drlc: false,
                eni: false,
            },
            Variant::LplfDrlc => Toggles {
                lplf: true,
                drlc: true,
                eni: false,
            },
        }
    }
}

/// A table row: a trained variant scored with or without ensembling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub variant: Variant,
    pub eni: bool,
}

impl Row {
    pub const TABLE: [Row; 5] = [
        Row {
            variant: Variant::Baseline,
            eni: false,
        },
        Row {
            variant: Variant::Lplf,
            eni: false,
        },
        Row {
            variant: Variant::LplfDrlc,
            eni: false,
        },
        Row {
            variant: Variant::Baseline,
            eni: true,
        },
        Row {
            variant: Variant::LplfDrlc,
            eni: true,
        },
    ];

    /// Check marks for (LPLF, DRLC, ENI).
    pub fn marks(self) -> [bool; 3] {
        let t = self.variant.toggles();
        [t.lplf, t.drlc, self.eni]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    pub ratio: LabelRatio,
    pub seed: u64,
    pub variant: Variant,
    pub dir: PathBuf,
    pub config: RunConfig,
}

pub fn ratio_dir_name(r: LabelRatio) -> String {
    format!("ratio_{}", r.to_string().replace('/', "-"))
}

/// Training runs needed for the ablation, in execution order.
pub fn plan(base: &RunConfig, root: &Path) -> Result<Vec<Job>> {
    let spec = &base.ablation;
    if spec.ratios.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("ablation.ratios and ablation.seeds must be non-empty".into()));
    }
    let mut jobs = Vec::new();
    for &ratio in &spec.ratios {
        for &seed in &spec.seeds {
            for variant in Variant::ALL {
                let dir = root
                    .join(ratio_dir_name(ratio))
                    .join(format!("seed_{seed}"))
                    .join(variant.dir_name());
                let mut config = base.clone();
                config.seed = seed;
                config.partition.ratio = ratio;
                config.toggles = variant.toggles();
                config.output_dir = dir.clone();
                config.validate()?;
                jobs.push(Job {
                    ratio,
                    seed,
                    variant,
                    dir,
                    config,
                });
            }
        }
    }
    Ok(jobs)
}

/// Mean and sample standard deviation of one table cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Cell {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Cell { values, mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub row: Row,
    /// One cell per ratio, in `AblationTable::ratios` order.
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub ratios: Vec<LabelRatio>,
    pub seeds: Vec<u64>,
    pub rows: Vec<TableRow>,
}

impl AblationTable {
    /// Markdown laid out like the component table: check marks, then one
    /// "mean (std)" mIoU column per ratio, in percent.
    pub fn to_markdown(&self, train_size: usize) -> String {
        let mut s = String::from("| baseline | LPLF | DRLC | ENI |");
        for r in &self.ratios {
            s.push_str(&format!(" {r} ({}) |", r.labeled_count(train_size)));
        }
        s.push_str("\n|:-:|:-:|:-:|:-:|");
        s.push_str(&":-:|".repeat(self.ratios.len()));
        s.push('\n');
        for tr in &self.rows {
            let m = |b: bool| if b { "✓" } else { " " };
            let [l, d, e] = tr.row.marks();
            s.push_str(&format!("| ✓ | {} | {} | {} |", m(l), m(d), m(e)));
            for c in &tr.cells {
                s.push_str(&format!(" {:.2} ({:.2}) |", 100.0 * c.mean, 100.0 * c.std));
            }
            s.push('\n');
        }
        s
    }
}

fn read_eval(dir: &Path) -> Result<FinalEval> {
    let path = dir.join(EVAL_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        msg: e.to_string(),
    })
}

/// Result of an earlier identical run, if its evaluation is on disk.
fn finished(job: &Job) -> Option<FinalEval> {
    read_eval(&job.dir)
        .ok()
        .filter(|ev| ev.config_hash == job.config.config_hash() && ev.iteration == job.config.train.max_iters)
}

fn run_job<T: Scalar>(job: &Job) -> Result<FinalEval> {
    if let Some(ev) = finished(job) {
        log::info!("reusing {}", job.dir.display());
        return Ok(ev);
    }
    log::info!(
        "training {} ratio {} seed {}",
        job.variant.dir_name(),
        job.ratio,
        job.seed
    );
    run_training::<T>(&job.config, &job.dir, &RunOptions::default())?
        .eval
        .ok_or_else(|| Error::Eval(format!("run in {} stopped early", job.dir.display())))
}

/// Runs (or reuses) every training of the plan on `jobs` worker threads and
/// assembles the table. Writes `table.md` and `table.json` into `root`.
pub fn run_ablation<T: Scalar>(base: &RunConfig, root: &Path, jobs: usize) -> Result<AblationTable> {
    let plan = plan(base, root)?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let results: Vec<Mutex<Option<Result<FinalEval>>>> = plan.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    let workers = jobs.clamp(1, plan.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(job) = plan.get(i) else { break };
                let r = run_job::<T>(job);
                *results[i].lock().expect("result lock") = Some(r);
            });
        }
    });
    let mut evals = Vec::with_capacity(plan.len());
    for r in results {
        evals.push(r.into_inner().expect("result lock").expect("every job ran")?);
    }

    let spec = &base.ablation;
    let lookup = |ratio, seed, variant| -> &FinalEval {
        let i = plan
            .iter()
            .position(|j| j.ratio == ratio && j.seed == seed && j.variant == variant)
            .expect("planned");
        &evals[i]
    };
    let rows = Row::TABLE
        .iter()
        .map(|&row| TableRow {
            row,
            cells: spec
                .ratios
                .iter()
                .map(|&ratio| {
                    Cell::from_values(
                        spec.seeds
                            .iter()
                            .map(|&seed| lookup(ratio, seed, row.variant).miou_for(row.eni))
                            .collect(),
                    )
                })
                .collect(),
        })
        .collect();
    let table = AblationTable {
        ratios: spec.ratios.clone(),
        seeds: spec.seeds.clone(),
        rows,
    };
    let train_size = match &base.dataset {
        crate::config::DatasetSpec::Synthetic { num_train, .. } => *num_train,
        crate::config::DatasetSpec::Directory { .. } => crate::run::load_datasets(base)?.train.len(),
    };
    let md = table.to_markdown(train_size);
    let md_path = root.join("table.md");
    std::fs::write(&md_path, &md).map_err(|e| Error::io(&md_path, e))?;
    let json_path = root.join("table.json");
    let json = serde_json::to_string_pretty(&table).map_err(|e| Error::Format {
        path: json_path.clone(),
        msg: e.to_string(),
    })?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_ratios_three_seeds_give_thirty_cells() {
        let mut cfg = RunConfig::default();
        cfg.ablation.ratios = vec![LabelRatio::Sixteenth, LabelRatio::Eighth];
        cfg.ablation.seeds = vec![0, 1, 2];
        let jobs = plan(&cfg, Path::new("/tmp/x")).unwrap();
        assert_eq!(jobs.len(), 18);
        assert_eq!(Row::TABLE.len() * 2 * 3, 30);
        let mut dirs: Vec<_> = jobs.iter().map(|j| j.dir.clone()).collect();
        dirs.sort();
        dirs.dedup();
        assert_eq!(dirs.len(), 18);
        assert!(jobs.iter().all(|j| !j.config.toggles.eni));
    }

    #[test]
    fn rows_mirror_the_component_table() {
        let marks: Vec<[bool; 3]> = Row::TABLE.iter().map(|r| r.marks()).collect();
        assert_eq!(
            marks,
            vec![
                [false, false, false],
                [true, false, false],
                [true, true, false],
                [false, false, true],
                [true, true, true],
            ]
        );
    }

    #[test]
    fn cell_statistics() {
        let c = Cell::from_values(vec![0.5, 0.7, 0.9]);
        assert!((c.mean - 0.7).abs() < 1e-12);
        assert!((c.std - 0.2).abs() < 1e-12);
        assert_eq!(Cell::from_values(vec![0.4]).std, 0.0);
    }

    #[test]
    fn markdown_cells_show_mean_and_std() {
        let table = AblationTable {
            ratios: vec![LabelRatio::Eighth],
            seeds: vec![0, 1],
            rows: vec![TableRow {
                row: Row::TABLE[4],
                cells: vec![Cell::from_values(vec![0.70, 0.72])],
            }],
        };
        let md = table.to_markdown(200);
        assert!(md.contains("1/8 (25)"), "{md}");
        assert!(md.contains("71.00 (1.41)"), "{md}");
        assert!(md.contains("| ✓ | ✓ | ✓ | ✓ |"), "{md}");
    }
}
