//! Procedural, fully observable environments over factored world states.
//!
//! Every renderer is checked for injectivity over the whole state space
//! before a dataset is built. Rasterization uses integer pixel-membership
//! tests and basic IEEE arithmetic only, so observations are byte-identical
//! across runs and platforms.

mod dataset;
mod render;
mod tensor_file;

pub use dataset::{
    gen_full_transitions, ood_split, ood_split_rightmost, ood_split_where, subsample_iid, Transition, TransitionDataset,
};
pub use render::{check_injective, Renderer};
pub use tensor_file::{decode_tensor, encode_tensor, read_tensor, write_tensor};

use thiserror::Error;

use crate::group::GroupError;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error("renderer mismatch: {0}")]
    Mismatch(String),
    #[error("renderer is not injective: states {first} and {second} look identical")]
    NotInjective { first: usize, second: usize },
    #[error("size limit exceeded: {0}")]
    Limit(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EnvError>;
