//! Dynamic Long-tailed Sample Arrangement: normalizing-flow filters that
//! progressively separate well-clustered (mostly tail-class) samples from the
//! rest of a long-tailed feature set, each stage followed by a cluster-aided
//! classifier.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which the CLI and model files use.

pub mod autodiff;
pub mod cascade;
pub mod classifier;
mod codec;
pub mod data;
pub mod error;
pub mod flow;
pub mod gmm;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod scalar;
pub mod trainer;

pub use error::{DlsaError, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

use rand::SeedableRng;

pub type Real = f64;
pub type Mat = matrix::Matrix<Real>;
pub type Flow = flow::FlowStack<Real>;
pub type Mixture = gmm::GaussianMixtureLatent<Real>;
pub type Filter = trainer::TrainedFilter<Real>;
pub type Cascade = cascade::DlsaCascade<Real>;

/// Deterministic, platform-independent generator used for every seeded draw.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
