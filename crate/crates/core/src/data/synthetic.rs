use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::error::{Error, Result};

/// Standard deviation of the additive per-pixel Gaussian noise.
pub const SHAPE_NOISE_STD: f64 = 0.05;

const MIN_SIDE: usize = 16;
const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Ellipse,
    Rectangle,
    Triangle,
}

struct Shape {
    kind: Primitive,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    /// Triangle orientation in radians.
    angle: f64,
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let kind = match rng.gen_range(0..3) {
            0 => Primitive::Ellipse,
            1 => Primitive::Rectangle,
            _ => Primitive::Triangle,
        };
        let (hf, wf) = (h as f64, w as f64);
        let ry = rng.gen_range(0.12..0.28) * hf;
        let rx = rng.gen_range(0.12..0.28) * wf;
        Shape {
            kind,
            cy: rng.gen_range(ry * 0.6..hf - ry * 0.6),
            cx: rng.gen_range(rx * 0.6..wf - rx * 0.6),
            ry,
            rx,
            angle: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        match self.kind {
            Primitive::Ellipse => dy * dy + dx * dx <= 1.0,
            Primitive::Rectangle => dy.abs() <= 0.8 && dx.abs() <= 0.8,
            Primitive::Triangle => {
                let verts: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = self.angle + k as f64 * std::f64::consts::TAU / 3.0;
                        (a.sin(), a.cos())
                    })
                    .collect();
                let sign = |p: (f64, f64), a: (f64, f64), b: (f64, f64)| {
                    (p.1 - b.1) * (a.0 - b.0) - (a.1 - b.1) * (p.0 - b.0)
                };
                let p = (dy, dx);
                let d1 = sign(p, verts[0], verts[1]);
                let d2 = sign(p, verts[1], verts[2]);
                let d3 = sign(p, verts[2], verts[0]);
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Saturated class colour with per-sample jitter; background is a weakly
/// tinted grey.
fn class_color(rng: &mut ChaCha8Rng, class: usize, num_classes: usize) -> [f64; 3] {
    let base_hue = (class - 1) as f64 / (num_classes - 1) as f64;
    let hue = base_hue + rng.gen_range(-0.04..0.04);
    hsv_to_rgb(hue, rng.gen_range(0.55..0.9), rng.gen_range(0.6..0.95))
}

/// Deterministic scene with `num_classes - 1` shapes (one per foreground
/// class) over a noisy background.
pub fn generate_synthetic_scene(seed: u64, size: (usize, usize), num_classes: usize) -> Result<Sample> {
    let (h, w) = size;
    if !(2..=255).contains(&num_classes) {
        return Err(Error::Config(format!(
            "synthetic scenes need 2..=255 classes, got {num_classes}"
        )));
    }
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Config(format!(
            "synthetic scenes must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Later shapes occlude earlier ones; redraw until every class is visible.
    let mut label = Array2::<u8>::zeros((h, w));
    let mut shapes = Vec::new();
    for _ in 0..MAX_ATTEMPTS {
        shapes = (1..num_classes).map(|_| Shape::random(&mut rng, h, w)).collect::<Vec<_>>();
        label.fill(0);
        for (k, shape) in shapes.iter().enumerate() {
            for ((y, x), l) in label.indexed_iter_mut() {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    *l = (k + 1) as u8;
                }
            }
        }
        let mut seen = vec![false; num_classes];
        label.iter().for_each(|&l| seen[l as usize] = true);
        if seen[1..].iter().all(|&s| s) {
            break;
        }
    }
    debug_assert_eq!(shapes.len(), num_classes - 1);

    let grey = rng.gen_range(0.2..0.8);
    let tint = hsv_to_rgb(rng.gen_range(0.0..1.0), 0.15, 1.0);
    let background = tint.map(|t| grey * t);
    let colors: Vec<[f64; 3]> = (1..num_classes)
        .map(|c| class_color(&mut rng, c, num_classes))
        .collect();

    let noise = Normal::new(0.0, SHAPE_NOISE_STD).expect("finite std");
    let mut image = Array3::<f32>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let l = label[[y, x]] as usize;
            let base = if l == 0 { background } else { colors[l - 1] };
            for ch in 0..3 {
                let v = base[ch] + noise.sample(&mut rng);
                image[[y, x, ch]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Sample::new(format!("synth_{seed:08}"), image, label)
}

/// `count` scenes with seeds `base_seed..base_seed + count`.
pub fn synthetic_split(
    base_seed: u64,
    count: usize,
    size: (usize, usize),
    num_classes: usize,
) -> Result<Vec<Sample>> {
    (0..count as u64)
        .map(|i| generate_synthetic_scene(base_seed + i, size, num_classes))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn histogram(s: &Sample, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        s.label.iter().for_each(|&l| h[l as usize] += 1);
        h
    }

    #[test]
    fn three_class_scene_has_expected_labels() {
        let s = generate_synthetic_scene(0, (64, 64), 3).unwrap();
        assert_eq!(s.image.dim(), (64, 64, 3));
        assert!(s.label.iter().all(|&l| l < 3));
        let hist = histogram(&s, 3);
        assert!(hist.iter().all(|&n| n > 0), "{hist:?}");
        assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn two_class_scene_has_one_foreground_class() {
        let s = generate_synthetic_scene(1, (64, 64), 2).unwrap();
        let hist = histogram(&s, 2);
        assert!(hist[1] > 0);
        assert_eq!(hist[0] + hist[1], 64 * 64);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic_scene(42, (32, 48), 4).unwrap();
        let b = generate_synthetic_scene(42, (32, 48), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_scene(43, (32, 48), 4).unwrap());
    }

    #[test]
    fn invalid_arguments_are_configuration_errors() {
        assert!(generate_synthetic_scene(0, (8, 64), 3).unwrap_err().is_config());
        assert!(generate_synthetic_scene(0, (64, 64), 1).unwrap_err().is_config());
    }

    #[test]
    fn every_foreground_class_is_visible_across_many_seeds() {
        for seed in 0..50 {
            let s = generate_synthetic_scene(seed, (64, 64), 4).unwrap();
            assert!(histogram(&s, 4).iter().all(|&n| n > 0), "seed {seed}");
        }
    }
}
