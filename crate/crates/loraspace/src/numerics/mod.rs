//! Differentiable numeric primitives: dense arrays, deterministic seeded
//! randomness, a reverse-mode autodiff tape, and a finite-difference
//! gradient checker.

mod array;
mod grad_check;
pub mod ops;
mod rng;
mod tape;

pub use array::{Array, Scalar};
pub use grad_check::{grad_check, GradCheckReport};
pub use ops::{attention, cosine, gelu, layer_norm, softmax_rows};
pub use rng::{label_id, RngStream};
pub use tape::{Grads, Graph, Node};
