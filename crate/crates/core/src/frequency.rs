//! Fourier-domain attention attack: a real per-image map `W` rescales the
//! 2-D spectrum of every channel, `x' = clamp(Re(IFFT(W ⊙ FFT(x))))`, and is
//! optimized by gradient ascent on the negative CW margin with a
//! frequency-dependent learning rate (small near DC, large at high
//! frequencies).

use std::sync::Arc;

use ndarray::{Array2, Array3, Array4, Axis};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::data::{AttackConfig, ImageBatch};
use crate::error::{Error, Result};
use crate::zoo::{per_image, stack_images, Ensemble};

/// Unnormalized forward / `1/MN`-normalized inverse 2-D FFT of `m`x`n` planes.
#[derive(Clone)]
pub struct Fft2 {
    m: usize,
    n: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(m: usize, n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            m,
            n,
            row_fwd: planner.plan_fft_forward(n),
            row_inv: planner.plan_fft_inverse(n),
            col_fwd: planner.plan_fft_forward(m),
            col_inv: planner.plan_fft_inverse(m),
        }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let (m, n) = (self.m, self.n);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for r in data.chunks_mut(n) {
            row.process(r);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); m];
        for j in 0..n {
            for i in 0..m {
                column[i] = data[i * n + j];
            }
            col.process(&mut column);
            for i in 0..m {
                data[i * n + j] = column[i];
            }
        }
        if inverse {
            let scale = 1.0 / (m * n) as f64;
            data.iter_mut().for_each(|v| *v *= scale);
        }
    }

    /// `F(u, v) = Σ x(p, q) e^{-2πi(up/M + vq/N)}` of a row-major real plane.
    pub fn forward(&self, plane: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.run(&mut data, false);
        data
    }

    pub fn forward_complex(&self, plane: &[Complex64]) -> Vec<Complex64> {
        let mut data = plane.to_vec();
        self.run(&mut data, false);
        data
    }

    /// Inverse of [`forward`](Self::forward), including the `1/MN` factor.
    pub fn inverse(&self, spectrum: &[Complex64]) -> Vec<Complex64> {
        let mut data = spectrum.to_vec();
        self.run(&mut data, true);
        data
    }
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.m, self.n)
    }
}

/// Per-bin learning rates, `(M, N)`, in unshifted FFT order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyLrField {
    pub rates: Array2<f64>,
}

/// Distance of bin `(u, v)` from DC after centering the spectrum.
pub fn centered_distance(u: usize, v: usize, m: usize, n: usize) -> f64 {
    let du = u.min(m - u) as f64;
    let dv = v.min(n - v) as f64;
    du.hypot(dv)
}

/// `lr(u, v) = lr_min + (lr_max − lr_min)(1 − G_σ(r)/G_σ(0))`.
pub fn make_lr_field(
    m: usize,
    n: usize,
    sigma: f64,
    lr_min: f64,
    lr_max: f64,
) -> Result<FrequencyLrField> {
    if !(sigma > 0.0) || !(lr_min >= 0.0 && lr_min <= lr_max) {
        return Err(Error::InvalidConfig(format!(
            "learning-rate field needs sigma > 0 and 0 <= lr_min <= lr_max (got {sigma}, {lr_min}, {lr_max})"
        )));
    }
    let rates = Array2::from_shape_fn((m, n), |(u, v)| {
        let r = centered_distance(u, v, m, n);
        lr_min + (lr_max - lr_min) * (1.0 - (-r * r / (2.0 * sigma * sigma)).exp())
    });
    Ok(FrequencyLrField { rates })
}

/// Pre-clamp reconstruction of one `(C, M, N)` image under map `w` (`M*N`).
fn reconstruct_raw(fft: &Fft2, img: &[f64], w: &[f64]) -> Vec<f64> {
    let plane = w.len();
    let mut out = Vec::with_capacity(img.len());
    for ch in img.chunks(plane) {
        let mut spectrum = fft.forward(ch);
        spectrum.iter_mut().zip(w).for_each(|(s, &wv)| *s *= wv);
        out.extend(fft.inverse(&spectrum).iter().map(|v| v.re));
    }
    out
}

/// `clamp(Re(IFFT(W ⊙ FFT(x))), 0, 1)` per channel; `maps` is `(B, M, N)`.
pub fn reconstruct(batch: &ImageBatch, maps: &Array3<f64>) -> Result<ImageBatch> {
    let n = batch.size();
    if maps.dim() != (batch.len(), n, n) {
        return Err(Error::Shape(format!(
            "attention maps {:?} do not match batch of {} {n}x{n} images",
            maps.dim(),
            batch.len()
        )));
    }
    let fft = Fft2::new(n, n);
    let maps = maps.as_standard_layout();
    let flat = maps.as_slice().expect("standard layout");
    let out = per_image(batch.pixels(), |i, img| {
        reconstruct_raw(&fft, img, &flat[i * n * n..(i + 1) * n * n])
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect()
    });
    Ok(batch.with_pixels_unchecked(stack_images(out, (3, n, n))))
}

/// CW margin `max(z_y − max_{k≠y} z_k, −κ)` and its gradient w.r.t. the logits.
pub fn cw_loss(logits: &[f64], label: usize, kappa: f64) -> (f64, Vec<f64>) {
    let (other, &best) = logits
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != label)
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least two classes");
    let margin = logits[label] - best;
    let mut grad = vec![0.0; logits.len()];
    if margin > -kappa {
        grad[label] = 1.0;
        grad[other] = -1.0;
        (margin, grad)
    } else {
        (-kappa, grad)
    }
}

/// Objective `J = −CW` of the reconstructed images and `∂J/∂W`, `(B, M, N)`.
///
/// `∂J/∂W(u, v) = Σ_c Re(F_c(u, v) · conj(G_c(u, v))) / MN` with `G_c` the
/// forward FFT of `∂J/∂x'_c`, zeroed where the clamp is active.
pub fn attention_gradient(
    ensemble: &Ensemble,
    batch: &ImageBatch,
    maps: &Array3<f64>,
    kappa: f64,
) -> Result<(Vec<f64>, Array3<f64>)> {
    let adv = reconstruct(batch, maps)?;
    let (values, grad_x) = ensemble.loss_gradient(adv.pixels(), batch.labels(), |z, y| {
        let (v, g) = cw_loss(z, y, kappa);
        (-v, g.into_iter().map(|d| -d).collect())
    })?;
    Ok((values, map_gradient(batch, maps, &grad_x)))
}

/// Chain rule from an output-pixel gradient back to the attention maps.
pub fn map_gradient(batch: &ImageBatch, maps: &Array3<f64>, grad_x: &Array4<f64>) -> Array3<f64> {
    let n = batch.size();
    let plane = n * n;
    let fft = Fft2::new(n, n);
    let maps_std = maps.as_standard_layout();
    let flat_maps = maps_std.as_slice().expect("standard layout");
    let gx = grad_x.as_standard_layout();
    let flat_g = gx.as_slice().expect("standard layout");
    let len = 3 * plane;
    let rows = per_image(batch.pixels(), |i, img| {
        let w = &flat_maps[i * plane..(i + 1) * plane];
        let raw = reconstruct_raw(&fft, img, w);
        let g = &flat_g[i * len..(i + 1) * len];
        let mut out = vec![0.0; plane];
        for c in 0..3 {
            let gc: Vec<f64> = (0..plane)
                .map(|p| {
                    let v = raw[c * plane + p];
                    if (0.0..=1.0).contains(&v) {
                        g[c * plane + p]
                    } else {
                        0.0
                    }
                })
                .collect();
            let spec_x = fft.forward(&img[c * plane..(c + 1) * plane]);
            let spec_g = fft.forward(&gc);
            for (o, (f, gg)) in out.iter_mut().zip(spec_x.iter().zip(&spec_g)) {
                *o += (f * gg.conj()).re / plane as f64;
            }
        }
        out
    });
    Array3::from_shape_vec((rows.len(), n, n), rows.into_iter().flatten().collect())
        .expect("one map per image")
}

/// Optimize one attention map per image and return the reconstruction.
pub fn frequency_attack(
    batch: &ImageBatch,
    ensemble: &Ensemble,
    cfg: &AttackConfig,
) -> Result<ImageBatch> {
    cfg.validate()?;
    ensemble.ensure_differentiable()?;
    let n = batch.size();
    let p = &cfg.frequency;
    let sigma = p.sigma.unwrap_or(n as f64 / 4.0);
    let field = make_lr_field(n, n, sigma, p.lr_min, p.lr_max)?;
    let mut maps = Array3::ones((batch.len(), n, n));
    for _ in 0..p.steps {
        let (_, grad) = attention_gradient(ensemble, batch, &maps, p.kappa)?;
        for (mut w, g) in maps.axis_iter_mut(Axis(0)).zip(grad.axis_iter(Axis(0))) {
            w.zip_mut_with(&(&g * &field.rates), |a, b| *a += b);
        }
    }
    reconstruct(batch, &maps)
}
