//! Figures for finished runs: loss curves, validation mIoU curves, mIoU
//! against label ratio, and an image | GT | prediction grid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use image::{imageops, Rgb, RgbImage};
use plotters::prelude::*;
use rrn_core::data::images_to_tensor;
use rrn_core::eval::predict_labels;
use rrn_core::ndarray::Axis;
use rrn_core::run::{load_datasets, read_jsonl, ValRecord, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, VAL_FILE};
use rrn_core::trainer::load_checkpoint;
use rrn_core::viz::{render_image, render_labels, save_png};
use rrn_core::{LossReport, RunConfig, Scalar};

const GRID_ROWS: usize = 4;
const SMOOTH: usize = 20;

struct Run {
    dir: PathBuf,
    label: String,
    config: RunConfig,
    metrics: Vec<LossReport>,
    val: Vec<ValRecord>,
}

impl Run {
    fn load(dir: &Path) -> anyhow::Result<Self> {
        if !dir.is_dir() {
            bail!("{} is not a run directory", dir.display());
        }
        let metrics_path = dir.join(METRICS_FILE);
        if !metrics_path.exists() {
            bail!("missing metrics log {}", metrics_path.display());
        }
        let metrics: Vec<LossReport> = read_jsonl(&metrics_path)?;
        if metrics.is_empty() {
            bail!("metrics log {} is empty", metrics_path.display());
        }
        let config = RunConfig::load(&dir.join(CONFIG_FILE))
            .with_context(|| format!("reading the configuration of {}", dir.display()))?;
        let val_path = dir.join(VAL_FILE);
        let val = if val_path.exists() { read_jsonl(&val_path)? } else { Vec::new() };
        Ok(Run {
            dir: dir.to_path_buf(),
            label: String::new(),
            config,
            metrics,
            val,
        })
    }

    /// Validation score under the run's own inference mode.
    fn val_curve(&self) -> Vec<(f64, f64)> {
        let eni = self.config.toggles.eni;
        self.val
            .iter()
            .map(|v| (v.iteration as f64, if eni { v.miou_ensemble } else { v.miou_branch1 }))
            .collect()
    }
}

/// Short legend names: the directory name, or the last two components when
/// names collide.
fn assign_labels(runs: &mut [Run]) {
    let name = |p: &Path, depth: usize| {
        let parts: Vec<_> = p.components().rev().take(depth).collect();
        parts
            .into_iter()
            .rev()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    };
    for depth in 1..=4 {
        let labels: Vec<String> = runs.iter().map(|r| name(&r.dir, depth)).collect();
        let mut unique = labels.clone();
        unique.sort();
        unique.dedup();
        if unique.len() == labels.len() || depth == 4 {
            for (r, l) in runs.iter_mut().zip(labels) {
                r.label = l;
            }
            return;
        }
    }
}

fn moving_average(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(points.len());
    let mut sum = 0.0;
    for (i, &(x, y)) in points.iter().enumerate() {
        sum += y;
        if i >= window {
            sum -= points[i - window].1;
        }
        out.push((x, sum / (i + 1).min(window) as f64));
    }
    out
}

fn bounds(series: &[Vec<(f64, f64)>]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    (x0, x1.max(x0 + 1.0), y0 - pad, y1 + pad)
}

/// One line per named series, with a legend.
fn line_plot(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[(String, Vec<(f64, f64)>)]) -> anyhow::Result<()> {
    let data: Vec<_> = series.iter().map(|(_, s)| s.clone()).collect();
    let (x0, x1, y0, y1) = bounds(&data);
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw()?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        if pts.len() < 30 {
            chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

fn loss_plot(runs: &[Run], path: &Path) -> anyhow::Result<()> {
    let series: Vec<_> = runs
        .iter()
        .map(|r| {
            let pts: Vec<_> = r.metrics.iter().map(|m| (m.iteration as f64, m.total)).collect();
            (r.label.clone(), moving_average(&pts, SMOOTH))
        })
        .collect();
    line_plot(path, "training loss", "iteration", "total loss (smoothed)", &series)
}

fn miou_plot(runs: &[Run], path: &Path) -> anyhow::Result<()> {
    let series: Vec<_> = runs.iter().map(|r| (r.label.clone(), r.val_curve())).collect();
    line_plot(path, "validation mIoU", "iteration", "mIoU", &series)
}

/// Final mIoU against labeled fraction, one line per component setting.
fn ratio_plot(runs: &[Run], path: &Path) -> anyhow::Result<()> {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in runs {
        let Some(&(_, last)) = r.val_curve().last() else { continue };
        let t = r.config.toggles;
        let key = format!(
            "lplf={} drlc={} eni={}",
            u8::from(t.lplf),
            u8::from(t.drlc),
            u8::from(t.eni)
        );
        groups.entry(key).or_default().push((r.config.partition.ratio.as_f64(), last));
    }
    let series: Vec<_> = groups
        .into_iter()
        .map(|(k, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (k, pts)
        })
        .collect();
    line_plot(path, "mIoU vs label ratio", "labeled fraction", "final mIoU", &series)
}

fn paste(grid: &mut RgbImage, tile: &RgbImage, col: usize, row: usize, cell: (u32, u32)) {
    let gap = 2;
    imageops::replace(
        grid,
        tile,
        (col as u32 * (cell.1 + gap)) as i64,
        (row as u32 * (cell.0 + gap)) as i64,
    );
}

/// Rows of image | ground truth | each run's prediction on the first
/// validation images of the first run.
fn prediction_grid<T: Scalar>(runs: &[Run], path: &Path) -> anyhow::Result<()> {
    let val = load_datasets(&runs[0].config)?.val;
    let samples = &val[..GRID_ROWS.min(val.len())];
    let (h, w) = (samples[0].height() as u32, samples[0].width() as u32);
    let mut columns: Vec<Vec<RgbImage>> = vec![
        samples.iter().map(|s| render_image(s.image.view())).collect(),
        samples.iter().map(|s| render_labels(&s.label)).collect(),
    ];
    for r in runs {
        let ckpt = r.dir.join(CHECKPOINT_FILE);
        let state = load_checkpoint::<T>(&ckpt, &r.config)
            .with_context(|| format!("loading {}", ckpt.display()))?;
        let mut col = Vec::new();
        for s in samples {
            let images = images_to_tensor::<T>(&[s])?;
            let pred = predict_labels(&state.nets.branches, &images, r.config.toggles.eni, &r.config.ensemble)?;
            col.push(render_labels(&pred.index_axis(Axis(0), 0).to_owned()));
        }
        columns.push(col);
    }
    let gap = 2;
    let mut grid = RgbImage::from_pixel(
        columns.len() as u32 * (w + gap) - gap,
        samples.len() as u32 * (h + gap) - gap,
        Rgb([255, 255, 255]),
    );
    for (c, col) in columns.iter().enumerate() {
        for (r, tile) in col.iter().enumerate() {
            paste(&mut grid, tile, c, r, (h, w));
        }
    }
    save_png(&grid, path)?;
    Ok(())
}

/// Writes the report figures into `out` and returns their paths.
pub fn report<T: Scalar>(dirs: &[PathBuf], out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut runs = Vec::with_capacity(dirs.len());
    let mut failures = Vec::new();
    for d in dirs {
        match Run::load(d) {
            Ok(r) => runs.push(r),
            Err(e) => failures.push(format!("{}: {e:#}", d.display())),
        }
    }
    if !failures.is_empty() {
        bail!("cannot report on {} run(s):\n  {}", failures.len(), failures.join("\n  "));
    }
    assign_labels(&mut runs);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut written = vec![out.join("loss_curves.svg"), out.join("miou.svg")];
    loss_plot(&runs, &written[0])?;
    miou_plot(&runs, &written[1])?;
    let mut ratios: Vec<String> = runs.iter().map(|r| r.config.partition.ratio.to_string()).collect();
    ratios.sort();
    ratios.dedup();
    if ratios.len() > 1 {
        let p = out.join("miou_vs_ratio.svg");
        ratio_plot(&runs, &p)?;
        written.push(p);
    }
    let grid = out.join("predictions.png");
    prediction_grid::<T>(&runs, &grid)?;
    written.push(grid);
    Ok(written)
}
