//! Building blocks shared by the spatial attacks.

pub mod gradient;
pub mod kernel;
pub mod sobel;
pub mod step;
pub mod transform;

pub use gradient::{
    refined_gradient, refined_gradient_from_seeds, refined_gradient_with,
    variance_reduced_gradient, LossGrad,
};
pub use kernel::{make_ti_kernel, ti_smooth, TiKernel};
pub use sobel::sobel_edge_mask;
pub use step::{l1_normalize, momentum_update, project_linf, sign, signed_step, MomentumState};
pub use transform::{
    di_transform, rotate_batch, rotation_transform, BatchTransform, ImageTransform, InputDiversity,
    SpatialMap,
};
