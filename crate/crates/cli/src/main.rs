use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rrn_core::ablation::run_ablation;
use rrn_core::run::{evaluate_checkpoint, load_datasets, CHECKPOINT_FILE};
use rrn_core::trainer::load_checkpoint;
use rrn_core::viz::dump_debug;
use rrn_core::{run_training, Error, RunConfig, RunOptions, Scalar};
use serde_json::json;

mod report;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "rrn", version, about = "Region relevance network: semi-supervised segmentation")]
struct Cli {
    /// Numeric precision of the networks.
    #[arg(long, value_enum, default_value_t = Precision::F32, global = true)]
    precision: Precision,

    /// Prefix for relative output directories.
    #[arg(long, env = "RRN_OUTPUT_ROOT", global = true)]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint of the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many iterations, writing a checkpoint.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Score branch 1 alone instead of the ensemble.
        #[arg(long)]
        no_eni: bool,
        /// Write prediction, filter mask and region-case PNGs here.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Run the component ablation over the configured ratios and seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Trainings to run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Plot loss and mIoU curves and a prediction grid for finished runs.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Where to write the figures; defaults to `report` under the output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(root: Option<&Path>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn load_config(path: &Path, root: Option<&Path>) -> rrn_core::Result<RunConfig> {
    let mut cfg = RunConfig::load(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
        e => e,
    })?;
    cfg.output_dir = resolve(root, &cfg.output_dir);
    cfg.validate()?;
    Ok(cfg)
}

fn train<T: Scalar>(cfg: &RunConfig, resume: Option<PathBuf>, max_steps: Option<usize>) -> anyhow::Result<()> {
    let opts = RunOptions {
        resume,
        stop_after: max_steps,
    };
    let out = run_training::<T>(cfg, &cfg.output_dir, &opts)?;
    match out.eval {
        Some(ev) => println!("final val mIoU {:.4} ({})", ev.miou, if ev.eni { "ensemble" } else { "branch 1" }),
        None => println!(
            "stopped at iteration {}; checkpoint in {}",
            out.iterations,
            cfg.output_dir.join(CHECKPOINT_FILE).display()
        ),
    }
    Ok(())
}

fn eval<T: Scalar>(cfg: &RunConfig, ckpt: &Path, eni: bool, dump: Option<&Path>) -> anyhow::Result<()> {
    let report = evaluate_checkpoint::<T>(cfg, ckpt, eni)?;
    let record = json!({
        "config_hash": cfg.config_hash(),
        "checkpoint": ckpt,
        "miou": report.miou,
        "per_class_iou": report.per_class_iou,
        "pixel_accuracy": report.pixel_accuracy,
        "eni": report.eni,
        "num_images": report.num_images,
    });
    println!("{}", serde_json::to_string_pretty(&record)?);
    if let Some(dir) = dump {
        let state = load_checkpoint::<T>(ckpt, cfg)?;
        let val = load_datasets(cfg)?.val;
        dump_debug(&state.nets, &val, eni, &cfg.ensemble, cfg.loss.epsilon, dir)?;
    }
    Ok(())
}

fn ablate<T: Scalar>(cfg: &RunConfig, jobs: usize) -> anyhow::Result<()> {
    let table = run_ablation::<T>(cfg, &cfg.output_dir, jobs)?;
    let md = std::fs::read_to_string(cfg.output_dir.join("table.md")).context("reading table.md")?;
    print!("{md}");
    log::info!("{} rows × {} ratios", table.rows.len(), table.ratios.len());
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let root = cli.output_root.as_deref();
    let f64 = matches!(cli.precision, Precision::F64);
    match cli.command {
        Command::Train {
            config,
            resume,
            max_steps,
        } => {
            let cfg = load_config(&config, root)?;
            if f64 {
                train::<f64>(&cfg, resume, max_steps)
            } else {
                train::<f32>(&cfg, resume, max_steps)
            }
        }
        Command::Eval {
            config,
            ckpt,
            no_eni,
            dump_dir,
        } => {
            let cfg = load_config(&config, root)?;
            if f64 {
                eval::<f64>(&cfg, &ckpt, !no_eni, dump_dir.as_deref())
            } else {
                eval::<f32>(&cfg, &ckpt, !no_eni, dump_dir.as_deref())
            }
        }
        Command::Ablate { config, jobs } => {
            if jobs == 0 {
                return Err(Error::Config("--jobs must be at least 1".into()).into());
            }
            let cfg = load_config(&config, root)?;
            if f64 {
                ablate::<f64>(&cfg, jobs)
            } else {
                ablate::<f32>(&cfg, jobs)
            }
        }
        Command::Report { run_dirs, out } => {
            let out = out.unwrap_or_else(|| resolve(root, Path::new("report")));
            let written = if f64 {
                report::report::<f64>(&run_dirs, &out)?
            } else {
                report::report::<f32>(&run_dirs, &out)?
            };
            if written.is_empty() {
                bail!("nothing written");
            }
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config() => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = err.to_string();
    for cause in err.chain().skip(1) {
        let c = cause.to_string();
        if !out.contains(&c) {
            out = format!("{out}: {c}");
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
