//! Procedurally generated ten-class shape images used to train the model zoo
//! and to build evaluation fixtures.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ImageBatch, CHANNELS};
use crate::rng::rng_from;

pub const NUM_CLASSES: usize = 10;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "disk",
    "square",
    "triangle",
    "ring",
    "plus",
    "h-stripes",
    "v-stripes",
    "checker",
    "cross",
    "dumbbell",
];

fn inside(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => r2 <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => v <= 0.6 && v >= -0.9 + 1.765 * u.abs(),
        3 => (0.3025..=1.0).contains(&r2),
        4 => (u.abs() <= 0.25 && v.abs() <= 1.0) || (v.abs() <= 0.25 && u.abs() <= 1.0),
        5 => u.abs() <= 1.1 && v.abs() <= 1.1 && (v * std::f64::consts::PI * 2.5).sin() > 0.0,
        6 => u.abs() <= 1.1 && v.abs() <= 1.1 && (u * std::f64::consts::PI * 2.5).sin() > 0.0,
        7 => {
            u.abs() <= 1.0
                && v.abs() <= 1.0
                && (u * std::f64::consts::PI * 2.0).sin() * (v * std::f64::consts::PI * 2.0).sin()
                    > 0.0
        }
        8 => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            r2 <= 1.21 && (((u - v) * s).abs() <= 0.25 || ((u + v) * s).abs() <= 0.25)
        }
        9 => (u - 0.55).powi(2) + v * v <= 0.16 || (u + 0.55).powi(2) + v * v <= 0.16,
        _ => unreachable!("class {class} out of range"),
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn render(class: usize, size: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let n = size as f64;
    let bg_a = random_color(rng);
    let bg_b = random_color(rng);
    let mut fg = random_color(rng);
    // keep the foreground visibly distinct from the mean background
    let bg_mean: Vec<f64> = (0..3).map(|c| 0.5 * (bg_a[c] + bg_b[c])).collect();
    while (0..3).map(|c| (fg[c] - bg_mean[c]).abs()).sum::<f64>() < 0.6 {
        fg = random_color(rng);
    }
    let grad_angle: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let (gs, gc) = grad_angle.sin_cos();

    let cx = n * rng.random_range(0.38..0.62);
    let cy = n * rng.random_range(0.38..0.62);
    let radius = n * rng.random_range(0.24..0.36);
    let theta = match class {
        5 | 6 | 4 | 8 => rng.random_range(-0.3..0.3),
        _ => rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    };
    let (st, ct) = theta.sin_cos();
    let noise = 0.04;

    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let mut coverage = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let px = (x as f64 + ox - cx) / radius;
                let py = (y as f64 + oy - cy) / radius;
                let u = ct * px + st * py;
                let v = -st * px + ct * py;
                if inside(class, u, v) {
                    coverage += 0.25;
                }
            }
            let t = 0.5 + 0.5 * ((x as f64 / n - 0.5) * gc + (y as f64 / n - 0.5) * gs);
            for c in 0..CHANNELS {
                let bg = bg_a[c] * (1.0 - t) + bg_b[c] * t;
                let jitter = noise * (rng.random::<f64>() - 0.5) * 2.0;
                out[c * plane + y * size + x] =
                    (bg * (1.0 - coverage) + fg[c] * coverage + jitter).clamp(0.0, 1.0);
            }
        }
    }
}

/// `n` images of side `size`, classes cycling `0..10`, ids `<prefix>-<index>`.
pub fn synthetic_batch(n: usize, size: usize, seed: u64, prefix: &str) -> ImageBatch {
    let mut pixels = Array4::zeros((n, CHANNELS, size, size));
    let labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
    let flat = pixels.as_slice_mut().expect("fresh array is contiguous");
    let len = CHANNELS * size * size;
    for (i, chunk) in flat.chunks_mut(len.max(1)).enumerate().take(n) {
        let mut rng = rng_from(seed_of!(seed, "synth", i));
        render(labels[i], size, &mut rng, chunk);
    }
    let ids = (0..n).map(|i| format!("{prefix}-{i:05}")).collect();
    ImageBatch::new(pixels, labels, ids).expect("rendered pixels are clamped")
}
