//! Information-theoretic bounded-rational decision hierarchies.
//!
//! - [`prob`]: categorical and diagonal-Gaussian primitives, KL, entropy and
//!   mutual information.
//! - [`tabular`]: exact Blahut-Arimoto style solvers on finite spaces.
//! - [`nn`]: small differentiable models (MLPs, linear heads) and optimizers.
//! - [`shs`]: the on-line specialization learner (selector, experts, twin critics, EMA priors).
//! - [`supervised`]: the one-step classification/regression variant and its datasets.
//! - [`envs`]: the switched scalar plant with its Riccati oracle and a two-link pendulum.

pub mod envs;
pub mod error;
pub mod prob;
pub mod shs;
pub mod supervised;
pub mod nn;
pub mod tabular;

pub use error::{Error, Result};
