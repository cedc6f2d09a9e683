//! Deterministic dense-array arithmetic, seeded randomness, and gradient
//! verification shared by all other modules.

mod array;
mod gradcheck;
pub mod linalg;
mod rng;

pub use array::DenseArray;
pub use gradcheck::{finite_diff_grad, grad_check, GradReport};
pub use rng::{reparam_sample, reparam_with_noise, stream_id, RngStream};
