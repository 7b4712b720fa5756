//! Conditional-diffusion black-box adversarial attack toolkit.
//!
//! The pipeline has three stages: collect clean/adversarial image pairs with
//! white-box attacks against local shadow classifiers, train a conditional
//! denoiser on those pairs, then attack hard-label victim classifiers by
//! conditional sampling with an L-inf projection, counting oracle queries.

pub mod attack;
pub mod autodiff;
pub mod classifier;
pub mod container;
pub mod data;
pub mod defenses;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod oracle;
pub mod pipeline;
pub mod records;
pub mod report;
pub mod rng;
pub mod runconfig;
pub mod schedule;
pub mod tensor;
pub mod whitebox;

pub use tensor::Tensor;
