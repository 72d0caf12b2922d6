//! Semantic disentangling generative zero-shot learning.
//!
//! A conditional VAE synthesizes visual features from class attributes; a
//! disentangling autoencoder splits every feature into a semantic-consistent
//! part `h_s` (scored against attributes by a relation network) and a
//! semantic-unrelated part `h_n`, and an adversarial density-ratio estimate of
//! the total correlation between the two parts pushes them towards
//! independence. Unseen classes are recognized by synthesizing `h_s` for their
//! attributes and training a softmax classifier.
//!
//! Everything runs on a small reverse-mode autodiff core ([`tensor`]) written
//! for this crate.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod networks;
pub mod objectives;
pub mod par;
pub mod tc_bench;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
