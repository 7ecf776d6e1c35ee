use ndarray::{Array4, Axis, Zip};

/// Normalizer guard for the per-image L1 norm.
pub const L1_GUARD: f64 = 1e-12;

/// `sign` with `sign(0) = 0`, unlike `f64::signum`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Accumulated gradient direction of momentum-based attacks.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub m: Array4<f64>,
    pub t: usize,
}

impl MomentumState {
    pub fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        Self {
            m: Array4::zeros(shape),
            t: 0,
        }
    }
}

/// Divide every image of `grad` by its own L1 norm (guarded).
pub fn l1_normalize(grad: &Array4<f64>) -> Array4<f64> {
    let mut out = grad.clone();
    for mut img in out.axis_iter_mut(Axis(0)) {
        let norm = img.iter().map(|v| v.abs()).sum::<f64>().max(L1_GUARD);
        img.mapv_inplace(|v| v / norm);
    }
    out
}

/// `m ← μ·m + grad / max(‖grad‖₁, guard)` with the norm taken per image.
pub fn momentum_update(state: MomentumState, grad: &Array4<f64>, mu: f64) -> MomentumState {
    assert_eq!(
        state.m.dim(),
        grad.dim(),
        "momentum and gradient shapes differ"
    );
    let mut m = state.m;
    Zip::from(&mut m)
        .and(&l1_normalize(grad))
        .for_each(|m, g| *m = mu * *m + g);
    MomentumState { m, t: state.t + 1 }
}

/// Clamp `x_adv` into `[x_orig - eps, x_orig + eps] ∩ [0, 1]` elementwise.
pub fn project_linf(x_adv: &Array4<f64>, x_orig: &Array4<f64>, eps: f64) -> Array4<f64> {
    assert_eq!(x_adv.dim(), x_orig.dim(), "projection shapes differ");
    let mut out = x_adv.clone();
    Zip::from(&mut out).and(x_orig).for_each(|a, &o| {
        let lo = (o - eps).max(0.0);
        let hi = (o + eps).min(1.0);
        *a = a.max(lo).min(hi);
    });
    out
}

/// `project(x + step · sign(direction) ⊙ mask)`.
pub fn signed_step(
    x: &Array4<f64>,
    x_orig: &Array4<f64>,
    direction: &Array4<f64>,
    step: f64,
    eps: f64,
    mask: Option<&Array4<f64>>,
) -> Array4<f64> {
    let mut next = x.clone();
    match mask {
        None => Zip::from(&mut next)
            .and(direction)
            .for_each(|x, &d| *x += step * sign(d)),
        Some(mask) => {
            let (b, c, h, w) = x.dim();
            assert_eq!(mask.dim(), (b, 1, h, w), "mask must be (B, 1, H, W)");
            for ch in 0..c {
                Zip::from(next.slice_mut(ndarray::s![.., ch..ch + 1, .., ..]))
                    .and(direction.slice(ndarray::s![.., ch..ch + 1, .., ..]))
                    .and(mask)
                    .for_each(|x, &d, &m| *x += step * sign(d) * m);
            }
        }
    }
    project_linf(&next, x_orig, eps)
}
