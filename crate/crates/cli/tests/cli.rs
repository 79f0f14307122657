use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rrn_core::trainer::load_checkpoint;
use rrn_core::{RunConfig, TrainState32};
use tempfile::TempDir;

fn tiny(output_dir: &str, extra: &str) -> String {
    format!(
        r#"seed = 3
output_dir = "{output_dir}"

[dataset]
kind = "synthetic"
num_train = 8
num_val = 4
height = 32
width = 32
seed = 5

[partition]
ratio = "1/4"

[model]
branch_width = 4
disc_width = 4

[augment]
crop_size = [32, 32]

[train]
max_iters = 8
warmup_iters = 2
eval_every = 4
{extra}"#
    )
}

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Self {
        Env {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.root().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_rrn"))
            .args(args)
            .current_dir(self.root())
            .env("RRN_OUTPUT_ROOT", self.root().join("out"))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.root().join("out").join(rel)
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_checkpoint_and_metrics_under_output_root() {
    let env = Env::new();
    env.write("c.toml", &tiny("run", ""));
    let o = env.run(&["train", "--config", "c.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["checkpoint.json", "metrics.jsonl", "val.jsonl", "eval.json", "config.toml"] {
        assert!(env.out("run").join(f).exists(), "{f} missing");
    }
    let metrics = fs::read_to_string(env.out("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 8);
    assert!(String::from_utf8_lossy(&o.stdout).contains("final val mIoU"));
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let env = Env::new();
    env.write("c.toml", &tiny("run", "lamda2 = 1.0\n"));
    let o = env.run(&["train", "--config", "c.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lamda2"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let env = Env::new();
    let o = env.run(&["train", "--config", "absent.toml"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn invalid_combination_exits_2() {
    let env = Env::new();
    let text = tiny("run", "").replace("[train]", "[toggles]\nlplf = false\ndrlc = true\n\n[train]");
    env.write("c.toml", &text);
    let o = env.run(&["train", "--config", "c.toml"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn divergence_exits_3() {
    let env = Env::new();
    env.write("c.toml", &tiny("run", "seg_lr = 1e8\n"));
    let o = env.run(&["train", "--config", "c.toml"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(env.out("run/state_dump.json").exists());
}

#[test]
fn interrupted_then_resumed_matches_uninterrupted() {
    let env = Env::new();
    env.write("a.toml", &tiny("a", ""));
    env.write("b.toml", &tiny("b", ""));
    assert_eq!(code(&env.run(&["train", "--config", "a.toml"])), 0);
    let o = env.run(&["train", "--config", "b.toml", "--max-steps", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!env.out("b/eval.json").exists());
    let ckpt = env.out("b/checkpoint.json");
    let o = env.run(&["train", "--config", "b.toml", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["metrics.jsonl", "val.jsonl"] {
        assert_eq!(
            fs::read_to_string(env.out("a").join(f)).unwrap(),
            fs::read_to_string(env.out("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn rerun_reproduces_metrics() {
    let env = Env::new();
    env.write("c.toml", &tiny("run", ""));
    assert_eq!(code(&env.run(&["train", "--config", "c.toml"])), 0);
    let first = fs::read(env.out("run/metrics.jsonl")).unwrap();
    assert_eq!(code(&env.run(&["train", "--config", "c.toml"])), 0);
    assert_eq!(first, fs::read(env.out("run/metrics.jsonl")).unwrap());
}

#[test]
fn eval_prints_structured_record() {
    let env = Env::new();
    env.write("c.toml", &tiny("run", ""));
    assert_eq!(code(&env.run(&["train", "--config", "c.toml"])), 0);
    let ckpt = env.out("run/checkpoint.json");
    let dump = env.root().join("dump");
    let o = env.run(&[
        "eval",
        "--config",
        "c.toml",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--no-eni",
        "--dump-dir",
        dump.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let cfg = RunConfig::load(&env.root().join("c.toml")).unwrap();
    assert_eq!(v["config_hash"], cfg.config_hash());
    assert_eq!(v["eni"], false);
    assert!(v["per_class_iou"].as_array().unwrap().len() >= 2);
    let acc = v["pixel_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // branch-1 score agrees with the one recorded at the end of training
    let recorded: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(env.out("run/eval.json")).unwrap()).unwrap();
    assert_eq!(v["miou"], recorded["branch1"]["miou"]);

    let pngs = fs::read_dir(&dump).unwrap().count();
    assert_eq!(pngs, 4 * 4);
}

#[test]
fn eval_with_missing_checkpoint_exits_3() {
    let env = Env::new();
    env.write("c.toml", &tiny("run", ""));
    let o = env.run(&["eval", "--config", "c.toml", "--ckpt", "nope.json"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn eval_rejects_checkpoint_of_another_config() {
    let env = Env::new();
    env.write("c.toml", &tiny("run", ""));
    env.write("d.toml", &tiny("run", "").replace("seed = 3", "seed = 4"));
    assert_eq!(code(&env.run(&["train", "--config", "c.toml"])), 0);
    let ckpt = env.out("run/checkpoint.json");
    let o = env.run(&["eval", "--config", "d.toml", "--ckpt", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn report_on_one_run_gives_two_plots_and_a_grid() {
    let env = Env::new();
    env.write("c.toml", &tiny("run", ""));
    assert_eq!(code(&env.run(&["train", "--config", "c.toml"])), 0);
    let o = env.run(&["report", env.out("run").to_str().unwrap(), "--out", "rep"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut files: Vec<_> = fs::read_dir(env.root().join("rep"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, vec!["loss_curves.svg", "miou.svg", "predictions.png"]);
    let grid = image::open(env.root().join("rep/predictions.png")).unwrap();
    // image | GT | one prediction column, 2-pixel gaps
    assert_eq!(grid.width(), 3 * 32 + 2 * 2);
    assert_eq!(grid.height(), 4 * 32 + 3 * 2);
}

#[test]
fn report_on_two_runs_overlays_curves_with_legend() {
    let env = Env::new();
    env.write("a.toml", &tiny("baseline", "").replace("[train]", "[toggles]\nlplf = false\ndrlc = false\n\n[train]"));
    env.write("b.toml", &tiny("full", "").replace("ratio = \"1/4\"", "ratio = \"1/2\""));
    assert_eq!(code(&env.run(&["train", "--config", "a.toml"])), 0);
    assert_eq!(code(&env.run(&["train", "--config", "b.toml"])), 0);
    let o = env.run(&[
        "report",
        env.out("baseline").to_str().unwrap(),
        env.out("full").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = fs::read_to_string(env.out("report/miou.svg")).unwrap();
    assert!(svg.contains("baseline") && svg.contains("full"));
    // each run: one curve and one legend swatch, in its own colour
    let strokes: Vec<&str> = svg
        .split("<polyline")
        .skip(1)
        .filter(|p| p.contains("stroke-width=\"2\""))
        .map(|p| p.split("stroke=\"").nth(1).unwrap().split('"').next().unwrap())
        .collect();
    assert_eq!(strokes.len(), 4);
    let mut colours = strokes.clone();
    colours.sort();
    colours.dedup();
    assert_eq!(colours.len(), 2);
    // two label ratios: the ratio plot appears too
    assert!(env.out("report/miou_vs_ratio.svg").exists());
    let grid = image::open(env.out("report/predictions.png")).unwrap();
    assert_eq!(grid.width(), 4 * 32 + 3 * 2);
}

#[test]
fn report_on_empty_dir_fails() {
    let env = Env::new();
    fs::create_dir(env.root().join("empty")).unwrap();
    let o = env.run(&["report", "empty"]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("metrics"), "{}", stderr(&o));
}

#[test]
fn report_names_every_bad_run() {
    let env = Env::new();
    fs::create_dir(env.root().join("x")).unwrap();
    fs::create_dir(env.root().join("y")).unwrap();
    let o = env.run(&["report", "x", "y"]);
    assert_ne!(code(&o), 0);
    let err = stderr(&o);
    assert!(err.contains("x/metrics.jsonl") && err.contains("y/metrics.jsonl"), "{err}");
}

#[test]
fn ablate_builds_table_and_baseline_never_trains_discriminators() {
    let env = Env::new();
    let text = tiny("abl", "").replace("max_iters = 8", "max_iters = 4")
        + "\n[ablation]\nratios = [\"1/4\", \"1/2\"]\nseeds = [0, 1]\n";
    env.write("c.toml", &text);
    let o = env.run(&["ablate", "--config", "c.toml", "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let md = fs::read_to_string(env.out("abl/table.md")).unwrap();
    let rows: Vec<_> = md.lines().skip(2).collect();
    assert_eq!(rows.len(), 5, "{md}");
    assert!(md.contains("1/4 (2)") && md.contains("1/2 (4)"), "{md}");
    for r in &rows {
        // mean (std) for each of the two ratios
        assert_eq!(r.matches('(').count(), 2, "{r}");
    }
    assert_eq!(String::from_utf8_lossy(&o.stdout), md);

    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(env.out("abl/table.json")).unwrap()).unwrap();
    let cell = &table["rows"][0]["cells"][0];
    let vals: Vec<f64> = cell["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(vals.len(), 2);
    let mean = (vals[0] + vals[1]) / 2.0;
    assert!((cell["mean"].as_f64().unwrap() - mean).abs() < 1e-12);

    for ratio in ["ratio_1-4", "ratio_1-2"] {
        for seed in [0, 1] {
            let dir = env.out(&format!("abl/{ratio}/seed_{seed}/baseline"));
            let cfg = RunConfig::load(&dir.join("config.toml")).unwrap();
            assert!(!cfg.toggles.lplf && !cfg.toggles.drlc);
            let state: TrainState32 = load_checkpoint(&dir.join("checkpoint.json"), &cfg).unwrap();
            let fresh = TrainState32::new(&cfg);
            assert_eq!(state.nets.discriminators, fresh.nets.discriminators);
            assert_eq!(state.disc_opt, fresh.disc_opt);
            assert_ne!(state.nets.branches, fresh.nets.branches);

            let full = env.out(&format!("abl/{ratio}/seed_{seed}/lplf_drlc"));
            let cfg = RunConfig::load(&full.join("config.toml")).unwrap();
            let state: TrainState32 = load_checkpoint(&full.join("checkpoint.json"), &cfg).unwrap();
            assert_ne!(state.nets.discriminators, TrainState32::new(&cfg).nets.discriminators);
        }
    }

    // a second invocation reuses the finished runs and reproduces the table
    let again = env.run(&["ablate", "--config", "c.toml"]);
    assert_eq!(code(&again), 0);
    assert_eq!(fs::read_to_string(env.out("abl/table.md")).unwrap(), md);
}

#[test]
fn zero_jobs_is_a_config_error() {
    let env = Env::new();
    env.write("c.toml", &tiny("abl", ""));
    assert_eq!(code(&env.run(&["ablate", "--config", "c.toml", "--jobs", "0"])), 2);
}
