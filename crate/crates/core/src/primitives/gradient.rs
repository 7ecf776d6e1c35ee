//! Gradient estimators that average the loss gradient over random input
//! transforms or random neighbours of the current point.

use ndarray::{Array4, Axis};
use rand::Rng;

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::primitives::kernel::{ti_smooth, TiKernel};
use crate::primitives::transform::InputDiversity;
use crate::rng::rng_from;

/// Gradient of the attack loss w.r.t. a pixel tensor. Labels are captured by
/// the closure; the tensor need not lie in `[0, 1]`.
pub type LossGrad<'a> = dyn Fn(&Array4<f64>) -> Result<Array4<f64>> + Sync + 'a;

/// `W * mean_k T_kᵀ ∇L(T_k(x))` over `n` transforms drawn with probability `p`.
pub fn refined_gradient(
    loss_grad: &LossGrad<'_>,
    batch: &ImageBatch,
    n: usize,
    p: f64,
    kernel: &TiKernel,
    seed: u64,
) -> Result<Array4<f64>> {
    refined_gradient_with(
        loss_grad,
        batch,
        n,
        &InputDiversity::ResizePad { probability: p },
        kernel,
        seed,
    )
}

pub fn refined_gradient_with(
    loss_grad: &LossGrad<'_>,
    batch: &ImageBatch,
    n: usize,
    diversity: &InputDiversity,
    kernel: &TiKernel,
    seed: u64,
) -> Result<Array4<f64>> {
    if n == 0 {
        return Err(Error::InvalidConfig("refined gradient needs n >= 1".into()));
    }
    let seeds: Vec<u64> = (0..n).map(|k| seed_of!(seed, "refine", k)).collect();
    refined_gradient_from_seeds(loss_grad, batch, &seeds, diversity, kernel)
}

/// Same as [`refined_gradient_with`] with explicit per-sample seeds. The
/// result depends only on the multiset of seeds.
pub fn refined_gradient_from_seeds(
    loss_grad: &LossGrad<'_>,
    batch: &ImageBatch,
    seeds: &[u64],
    diversity: &InputDiversity,
    kernel: &TiKernel,
) -> Result<Array4<f64>> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("refined gradient needs n >= 1".into()));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    let mut total = Array4::zeros(batch.pixels().dim());
    for s in sorted {
        let t = diversity.sample(batch, s);
        let g = loss_grad(&t.forward(batch.pixels()))?;
        total += &t.adjoint(&g);
    }
    total /= seeds.len() as f64;
    Ok(ti_smooth(kernel, &total))
}

/// Mean gradient over `m` points drawn uniformly from the L∞ ball of
/// `radius` around each image. Draws come in antithetic pairs `±u` (plus the
/// centre itself when `m` is odd), which makes the estimate exact for
/// quadratic losses.
pub fn variance_reduced_gradient(
    loss_grad: &LossGrad<'_>,
    batch: &ImageBatch,
    m: usize,
    radius: f64,
    seed: u64,
) -> Result<Array4<f64>> {
    if m == 0 || !(radius >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "variance reduction needs m >= 1 and radius >= 0 (got {m}, {radius})"
        )));
    }
    let x = batch.pixels();
    if m == 1 || radius == 0.0 {
        return loss_grad(x);
    }
    let mut total = Array4::zeros(x.dim());
    if m % 2 == 1 {
        total += &loss_grad(x)?;
    }
    for pair in 0..m / 2 {
        let mut noise = Array4::zeros(x.dim());
        for (mut img, id) in noise.axis_iter_mut(Axis(0)).zip(batch.ids()) {
            let mut rng = rng_from(seed_of!(seed, "neighbour", id.as_str(), pair));
            img.mapv_inplace(|_| rng.random_range(-radius..=radius));
        }
        total += &loss_grad(&(x + &noise))?;
        total += &loss_grad(&(x - &noise))?;
    }
    Ok(total / m as f64)
}
