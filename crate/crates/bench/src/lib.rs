//! Inputs shared by the criterion benchmarks.

use std::sync::Arc;

use advcomp_core::nn::{Network, Shape};
use advcomp_core::synth::synthetic_batch;
use advcomp_core::zoo::{default_zoo, ModelHandle};
use advcomp_core::ImageBatch;
use ndarray::Array4;

pub fn images(n: usize, size: usize) -> ImageBatch {
    synthetic_batch(n, size, 99, "bench")
}

pub fn gradient_like(n: usize, size: usize) -> Array4<f64> {
    Array4::from_shape_fn((n, 3, size, size), |(b, c, y, x)| {
        ((b * 31 + c * 7 + y * 3 + x) as f64 * 0.37).sin()
    })
}

/// Untrained network with the architecture of zoo member `id`.
pub fn zoo_network(id: &str, size: usize) -> Arc<Network> {
    let member = default_zoo(size)
        .into_iter()
        .find(|m| m.id == id)
        .unwrap_or_else(|| panic!("no zoo member {id}"));
    Arc::new(Network::new(Shape::new(3, size, size), member.layers, 7).expect("valid architecture"))
}

pub fn zoo_handle(id: &str, size: usize) -> ModelHandle {
    ModelHandle::new(id, zoo_network(id, size))
}
