//! Desk-scale toolkit for unrestricted adversarial attack competitions.
//!
//! The crate bundles the transfer attacks used by the top competition entries
//! (TDMI with minimum-budget search, perceptual-loss ensembles, gradient
//! refining, rotation ensembles, Fourier attention maps) together with the
//! organizer's scoring pipeline: attack success rate, FID, LPIPS, the combined
//! machine score and the human-annotation aggregation.

#[macro_use]
pub mod rng;

pub mod attacks;
pub mod data;
pub mod error;
pub mod frequency;
pub mod harness;
pub mod nn;
pub mod primitives;
pub mod scoring;
pub mod synth;
pub mod zoo;

pub use data::{
    load_dataset, save_images, AttackConfig, AttackMethod, ImageBatch, ImageScore, Perturbation,
    ScoreReport,
};
pub use error::{Error, Result};
pub use zoo::{
    apply_defense, ensemble_logits, fid_features, true_class_probability, Classifier,
    DefenseConfig, Ensemble, FeatureExtractor, ModelHandle, Zoo,
};
