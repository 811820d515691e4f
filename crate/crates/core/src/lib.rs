//! Demonstration-guided exploration laboratory.
//!
//! The crate bundles everything needed to train and benchmark an
//! expert-guided deterministic actor-critic on toy goal-conditioned
//! manipulation tasks:
//!
//! - [`nn`]: feed-forward networks with hand-derived backpropagation,
//!   Adam, Polyak target updates, and a binary checkpoint format;
//! - [`env`]: deterministic 2-D point-manipulation environments with
//!   scripted expert controllers and demonstration recording;
//! - [`replay`]: episode-structured replay buffers with hindsight goal
//!   relabeling (future strategy) and mixed agent/demo batch sampling;
//! - [`guidance`]: expert-action propagation to arbitrary states via
//!   exact k-NN locally weighted regression, or a behavior-cloned network;
//! - [`agent`]: the guided actor-critic plus baselines behind one
//!   training interface;
//! - [`stats`]: interquartile means and stratified bootstrap confidence
//!   intervals for run aggregation.
//!
//! Numeric kernels are generic over [`scalar::Real`]; everything above
//! them uses the crate-level [`Scalar`] alias.

pub mod agent;
pub mod env;
pub mod error;
pub mod guidance;
pub mod nn;
pub mod replay;
pub mod rng;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Real;

/// Concrete scalar used by the environments, agents, and file formats.
///
/// 64-bit floats keep finite-difference gradient checks tight and make
/// cross-run determinism exact at desk scale.
pub type Scalar = f64;
