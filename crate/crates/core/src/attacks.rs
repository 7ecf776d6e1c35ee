//! Spatial-domain transfer attacks: TDMI with minimum-budget search, the
//! perceptual-loss ensemble attack, R-DTI and the rotation ensemble attack,
//! plus the BIM/PGD baselines.
//!
//! Every random draw is seeded by `(cfg.seed, iteration, image id)`, so an
//! image's trajectory does not depend on which other images share its batch.

use ndarray::{Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AttackConfig, ImageBatch};
use crate::error::{Error, Result};
use crate::primitives::{
    make_ti_kernel, momentum_update, refined_gradient, signed_step, sobel_edge_mask, ti_smooth,
    variance_reduced_gradient, InputDiversity, MomentumState, TiKernel,
};
use crate::rng::rng_from;
use crate::scoring::lpips_gradient;
use crate::zoo::{true_class_probability, Classifier, Ensemble, FeatureExtractor};

/// Output of the minimum-budget search.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub adversarial: ImageBatch,
    pub chosen_epsilon: Vec<f64>,
    pub succeeded_on_validation: Vec<bool>,
    pub iterations_used: Vec<usize>,
}

impl AttackResult {
    /// Same budget for every image, no validation verdict.
    pub fn uniform(adversarial: ImageBatch, epsilon: f64, iterations: usize) -> Self {
        let n = adversarial.len();
        Self {
            adversarial,
            chosen_epsilon: vec![epsilon; n],
            succeeded_on_validation: vec![false; n],
            iterations_used: vec![iterations; n],
        }
    }
}

/// Per-image record of the search, serialized into run metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBudget {
    pub id: String,
    pub chosen_epsilon: f64,
    pub succeeded_on_validation: bool,
    pub iterations_used: usize,
}

impl AttackResult {
    pub fn budgets(&self) -> Vec<ImageBudget> {
        self.adversarial
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| ImageBudget {
                id: id.clone(),
                chosen_epsilon: self.chosen_epsilon[i],
                succeeded_on_validation: self.succeeded_on_validation[i],
                iterations_used: self.iterations_used[i],
            })
            .collect()
    }
}

struct MomentumTi {
    diversity: InputDiversity,
    kernel: TiKernel,
    decay: f64,
    epsilon: f64,
    step: f64,
    iterations: usize,
    seed: u64,
}

/// `m ← μ m + W*∇/‖W*∇‖₁` at a transformed input, then a signed projected step.
fn momentum_ti(batch: &ImageBatch, ensemble: &Ensemble, p: &MomentumTi) -> Result<ImageBatch> {
    ensemble.ensure_differentiable()?;
    let orig = batch.pixels();
    let mut x = orig.clone();
    let mut state = MomentumState::zeros(x.dim());
    for t in 0..p.iterations {
        let tr = p.diversity.sample(batch, seed_of!(p.seed, "iter", t));
        let (_, g) = ensemble.cross_entropy_gradient(&tr.forward(&x), batch.labels())?;
        let g = ti_smooth(&p.kernel, &tr.adjoint(&g));
        state = momentum_update(state, &g, p.decay);
        x = signed_step(&x, orig, &state.m, p.step, p.epsilon, None);
    }
    Ok(batch.with_pixels_unchecked(x))
}

/// Translation-invariant, diverse-input, momentum iterative attack.
pub fn tdmi_attack(
    batch: &ImageBatch,
    ensemble: &Ensemble,
    cfg: &AttackConfig,
) -> Result<ImageBatch> {
    cfg.validate()?;
    momentum_ti(
        batch,
        ensemble,
        &MomentumTi {
            diversity: InputDiversity::ResizePad {
                probability: cfg.di_probability,
            },
            kernel: make_ti_kernel(cfg.ti_kernel_size)?,
            decay: cfg.momentum_decay,
            epsilon: cfg.epsilon,
            step: cfg.step_size,
            iterations: cfg.iterations,
            seed: seed_of!(cfg.seed, "tdmi"),
        },
    )
}

/// Basic iterative method: signed gradient steps, no transforms or momentum.
pub fn bim_attack(
    batch: &ImageBatch,
    ensemble: &Ensemble,
    epsilon: f64,
    step: f64,
    iterations: usize,
) -> Result<ImageBatch> {
    pgd_attack(batch, ensemble, epsilon, step, iterations, None)
}

/// BIM from a uniform random start in the ε-ball when `random_start` holds a seed.
pub fn pgd_attack(
    batch: &ImageBatch,
    ensemble: &Ensemble,
    epsilon: f64,
    step: f64,
    iterations: usize,
    random_start: Option<u64>,
) -> Result<ImageBatch> {
    ensemble.ensure_differentiable()?;
    let orig = batch.pixels();
    let mut x = orig.clone();
    if let Some(seed) = random_start {
        for (mut img, id) in x.axis_iter_mut(Axis(0)).zip(batch.ids()) {
            let mut rng = rng_from(seed_of!(seed, "pgd-start", id.as_str()));
            img.mapv_inplace(|v| (v + rng.random_range(-epsilon..=epsilon)).clamp(0.0, 1.0));
        }
    }
    for _ in 0..iterations {
        let (_, g) = ensemble.cross_entropy_gradient(&x, batch.labels())?;
        x = signed_step(&x, orig, &g, step, epsilon, None);
    }
    Ok(batch.with_pixels_unchecked(x))
}

/// Step size used at radius `epsilon`: the configured `step_size / epsilon`
/// ratio is kept, so every attempt spends the same number of steps to reach
/// its boundary.
pub fn search_step(cfg: &AttackConfig, epsilon: f64) -> f64 {
    if cfg.epsilon > 0.0 {
        cfg.step_size * epsilon / cfg.epsilon
    } else {
        epsilon / cfg.iterations.max(1) as f64
    }
}

/// Per image, the smallest radius of `cfg.epsilon_set` whose TDMI example
/// pushes the validation models' true-class probability below
/// `cfg.validation_threshold`. Images that qualify are frozen; the rest move
/// on to the next radius. Images that never qualify keep the largest-radius
/// attempt with `succeeded_on_validation = false`.
pub fn epsilon_search_attack(
    batch: &ImageBatch,
    train: &Ensemble,
    validation: &impl Classifier,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if cfg.epsilon_set.is_empty() {
        return Err(Error::EmptyEpsilonSet);
    }
    cfg.validate()?;
    train.ensure_differentiable()?;
    let n = batch.len();
    let largest = *cfg.epsilon_set.last().expect("non-empty");
    let mut adv = batch.pixels().clone();
    let mut chosen = vec![largest; n];
    let mut succeeded = vec![false; n];
    let mut used = vec![0usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    for &eps in &cfg.epsilon_set {
        if active.is_empty() {
            break;
        }
        let sub = batch.select(&active);
        let attempt_cfg = AttackConfig {
            epsilon: eps,
            step_size: search_step(cfg, eps),
            ..cfg.clone()
        };
        let out = tdmi_attack(&sub, train, &attempt_cfg)?;
        let probs = true_class_probability(validation, out.pixels(), sub.labels());
        let mut still = Vec::new();
        for (k, &i) in active.iter().enumerate() {
            adv.index_axis_mut(Axis(0), i).assign(&out.image(k));
            chosen[i] = eps;
            used[i] += cfg.iterations;
            if probs[k] < cfg.validation_threshold {
                succeeded[i] = true;
            } else {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(AttackResult {
        adversarial: batch.with_pixels_unchecked(adv),
        chosen_epsilon: chosen,
        succeeded_on_validation: succeeded,
        iterations_used: used,
    })
}

/// Momentum attack ascending `CE − λ·LPIPS − φ·MSE`, with TI smoothing after
/// momentum, an edge-suppressing step mask, an optional variance-reduced
/// gradient and optional resize/pad/excision input diversity.
pub fn perceptual_attack(
    batch: &ImageBatch,
    ensemble: &Ensemble,
    lpips: &FeatureExtractor,
    cfg: &AttackConfig,
) -> Result<ImageBatch> {
    cfg.validate()?;
    ensemble.ensure_differentiable()?;
    let kernel = make_ti_kernel(cfg.ti_kernel_size)?;
    let mask = (cfg.edge_beta > 0.0).then(|| sobel_edge_mask(batch, cfg.edge_beta));
    let diversity = if cfg.input_diversity {
        InputDiversity::ResizePadCutout {
            probability: cfg.di_probability,
        }
    } else {
        InputDiversity::None
    };
    let seed = seed_of!(cfg.seed, "perceptual");
    let orig = batch.pixels();
    let (_, c, h, w) = orig.dim();
    let dims = (c * h * w) as f64;
    let mut x = orig.clone();
    let mut state = MomentumState::zeros(x.dim());
    for t in 0..cfg.iterations {
        let alpha = cfg.step_at(t);
        let tr = diversity.sample(batch, seed_of!(seed, "iter", t));
        let objective = |p: &Array4<f64>| -> Result<Array4<f64>> {
            let (_, ce) = ensemble.cross_entropy_gradient(&tr.forward(p), batch.labels())?;
            let mut grad = tr.adjoint(&ce);
            if cfg.lpips_weight > 0.0 {
                let (_, lg) = lpips_gradient(lpips, p, orig);
                grad.scaled_add(-cfg.lpips_weight, &lg);
            }
            if cfg.mse_weight > 0.0 {
                grad.scaled_add(-2.0 * cfg.mse_weight / dims, &(p - orig));
            }
            Ok(grad)
        };
        let grad = if cfg.variance_samples > 0 {
            variance_reduced_gradient(
                &objective,
                &batch.with_pixels_unchecked(x.clone()),
                cfg.variance_samples,
                cfg.variance_radius_factor * alpha,
                seed_of!(seed, "neighbours", t),
            )?
        } else {
            objective(&x)?
        };
        state = momentum_update(state, &grad, cfg.momentum_decay);
        let direction = ti_smooth(&kernel, &state.m);
        x = signed_step(&x, orig, &direction, alpha, cfg.epsilon, mask.as_ref());
    }
    Ok(batch.with_pixels_unchecked(x))
}

/// Signed steps along the refined gradient (mean of `refine_count`
/// TI-smoothed gradients under independent diverse-input draws). No
/// momentum term; `momentum_decay` is ignored.
pub fn rdti_attack(
    batch: &ImageBatch,
    ensemble: &Ensemble,
    cfg: &AttackConfig,
) -> Result<ImageBatch> {
    cfg.validate()?;
    ensemble.ensure_differentiable()?;
    let kernel = make_ti_kernel(cfg.ti_kernel_size)?;
    let seed = seed_of!(cfg.seed, "rdti");
    let orig = batch.pixels();
    let ce = |p: &Array4<f64>| Ok(ensemble.cross_entropy_gradient(p, batch.labels())?.1);
    let mut x = orig.clone();
    for t in 0..cfg.iterations {
        let g = refined_gradient(
            &ce,
            &batch.with_pixels_unchecked(x.clone()),
            cfg.refine_count,
            cfg.di_probability,
            &kernel,
            seed_of!(seed, "iter", t),
        )?;
        x = signed_step(&x, orig, &g, cfg.step_size, cfg.epsilon, None);
    }
    Ok(batch.with_pixels_unchecked(x))
}

/// Momentum TI attack whose input transform is random resize, random padding
/// and a random rotation in `[-rotation_max, rotation_max]`, applied with
/// probability `di_probability`.
pub fn rotation_ensemble_attack(
    batch: &ImageBatch,
    ensemble: &Ensemble,
    cfg: &AttackConfig,
) -> Result<ImageBatch> {
    cfg.validate()?;
    momentum_ti(
        batch,
        ensemble,
        &MomentumTi {
            diversity: InputDiversity::ResizePadRotate {
                probability: cfg.di_probability,
                max_angle: cfg.rotation_max,
                resize: cfg.rotation_resize,
            },
            kernel: make_ti_kernel(cfg.ti_kernel_size)?,
            decay: cfg.momentum_decay,
            epsilon: cfg.epsilon,
            step: cfg.step_size,
            iterations: cfg.iterations,
            seed: seed_of!(cfg.seed, "rotation"),
        },
    )
}
