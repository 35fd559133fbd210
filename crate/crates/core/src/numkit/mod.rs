//! Deterministic dense linear algebra, sampling, and norm primitives.

mod gmm;
pub mod io;
mod matrix;
mod rng;

pub use gmm::{sample_gmm, Embedding, GmmDescriptor, GmmMode, GmmSpec};
pub use matrix::{frobenius_norm, softmax_columns, spectral_norm, Matrix};
pub use rng::RngStream;
