use ndarray::Array4;

use crate::data::ImageBatch;
use crate::zoo::{per_image, stack_images};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Per-pixel multiplier `1 - beta * |∇ gray| / max |∇ gray|`, shape `(B, 1, H, W)`.
///
/// Borders are replicate padded so the frame of the image does not register
/// as an edge.
pub fn sobel_edge_mask(batch: &ImageBatch, beta: f64) -> Array4<f64> {
    let n = batch.size();
    let plane = n * n;
    let masks = per_image(batch.pixels(), |_, img| {
        if beta == 0.0 {
            return vec![1.0; plane];
        }
        let gray: Vec<f64> = (0..plane)
            .map(|p| (0..3).map(|c| LUMA[c] * img[c * plane + p]).sum())
            .collect();
        let at = |y: isize, x: isize| {
            let y = y.clamp(0, n as isize - 1) as usize;
            let x = x.clamp(0, n as isize - 1) as usize;
            gray[y * n + x]
        };
        let mut mag = vec![0.0; plane];
        for y in 0..n as isize {
            for x in 0..n as isize {
                let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                    - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
                let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                    - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
                mag[y as usize * n + x as usize] = gx.hypot(gy);
            }
        }
        let max = mag.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            return vec![1.0; plane];
        }
        mag.iter().map(|m| 1.0 - beta * m / max).collect()
    });
    stack_images(masks, (1, n, n))
}
