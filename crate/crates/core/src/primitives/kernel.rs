use ndarray::{Array2, Array4};

use crate::error::{Error, Result};
use crate::zoo::{per_image, stack_images};

/// Normalized, non-negative smoothing kernel for translation-invariant attacks.
#[derive(Clone, Debug, PartialEq)]
pub struct TiKernel {
    weights: Array2<f64>,
}

impl TiKernel {
    pub fn identity() -> Self {
        Self {
            weights: Array2::ones((1, 1)),
        }
    }

    pub fn size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn is_identity(&self) -> bool {
        self.size() == 1
    }
}

/// Gaussian kernel with σ = size / 3, normalized to unit sum.
pub fn make_ti_kernel(size: usize) -> Result<TiKernel> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "TI kernel size {size} must be odd"
        )));
    }
    let sigma = size as f64 / 3.0;
    let mid = (size / 2) as f64;
    let raw = Array2::from_shape_fn((size, size), |(i, j)| {
        let r2 = (i as f64 - mid).powi(2) + (j as f64 - mid).powi(2);
        (-r2 / (2.0 * sigma * sigma)).exp()
    });
    let total = raw.sum();
    Ok(TiKernel {
        weights: raw / total,
    })
}

/// Depthwise 2-D convolution of every channel with `kernel`, zero padded,
/// same-size output.
pub fn ti_smooth(kernel: &TiKernel, grad: &Array4<f64>) -> Array4<f64> {
    if kernel.is_identity() {
        return grad * kernel.weights[[0, 0]];
    }
    let (_, c, h, w) = grad.dim();
    let k = kernel.size();
    let r = (k / 2) as isize;
    let plane = h * w;
    let images = per_image(grad, |_, img| {
        let mut out = vec![0.0; img.len()];
        for ch in 0..c {
            let src = &img[ch * plane..(ch + 1) * plane];
            let dst = &mut out[ch * plane..(ch + 1) * plane];
            for ky in 0..k {
                // out[y][x] += w[ky][kx] * src[y - ky + r][x - kx + r]
                let dy = r - ky as isize;
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).clamp(0, h as isize) as usize;
                for kx in 0..k {
                    let dx = r - kx as isize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                    if x1 <= x0 {
                        continue;
                    }
                    let wv = kernel.weights[[ky, kx]];
                    for y in y0..y1.max(y0) {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (d, v) in dst[y * w + x0..y * w + x1].iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
        out
    });
    stack_images(images, (c, h, w))
}
