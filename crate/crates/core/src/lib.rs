//! Spatial-temporal hidden-state caching for transformer denoising stacks.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` and `f64`);
//! the aliases below fix the payload type used by traces and the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approx;
pub mod bench;
pub mod engine;
pub mod interp;
pub mod model;
pub mod rng;
pub mod saliency;
pub mod scalar;
pub mod schedule;
pub mod stats;
pub mod tensor;
pub mod trace;
pub mod verify;

pub use engine::{fastcache_timestep, run_generation, EngineConfig, EngineState, SkipMode};
pub use scalar::Scalar;
pub use stats::ChiSquareTest;
pub use tensor::Matrix;

pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
/// An `N × D` hidden state as stored in traces.
pub type HiddenState = tensor::Matrix<f32>;
pub type Model32 = model::ToyModel<f32>;
pub type Model64 = model::ToyModel<f64>;
pub type Approximator32 = approx::LinearApproximator<f32>;
pub type ApproximatorSet32 = approx::ApproximatorSet<f32>;
pub type Engine<'m> = engine::EngineState<'m, f32>;
