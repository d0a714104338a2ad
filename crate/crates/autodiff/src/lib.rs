//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Built for small sequence models trained on CPU: a per-step tape
//! ([`Graph`]) with the operator set those models need, a named parameter
//! store, Adam, and seeded initializers. All randomness is derived from
//! explicit seeds and all reductions use fixed summation orders, so training
//! trajectories are bit-reproducible at any worker count.

mod adam;
mod error;
mod graph;
pub mod init;
pub mod rng;
mod store;
mod tensor;

pub use adam::Adam;
pub use error::{AutodiffError, Result};
pub use graph::{Graph, NodeId};
pub use store::ParamStore;
pub use tensor::Tensor;
