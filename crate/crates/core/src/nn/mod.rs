//! Minimal deterministic reverse-mode autodiff for dense networks.
//!
//! Training runs in `f32`; every model is generic over [`Real`] so gradient
//! checks can run the same code in `f64`. Matrix products go through
//! `matrixmultiply` single-threaded, so a fixed seed reproduces loss curves
//! bit for bit on the same machine.
//!
//! Randomness uses xoshiro256** seeded through `seed_from_u64`.

mod gradcheck;
mod kernels;
mod mlp;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use kernels::{batch_matvec, matmul_square, row_sq_norm};
pub use mlp::{Mlp, MlpVars, OutputActivation};
pub use optim::Adam;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub type Rng = rand_xoshiro::Xoshiro256StarStar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a master seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the seed through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` draws from the standard normal distribution.
pub fn standard_normal<T: Real>(rng: &mut Rng, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            T::of(x)
        })
        .collect()
}

#[cfg(test)]
mod tests;
