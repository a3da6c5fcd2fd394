//! Oblivious cloud-device hybrid latent diffusion.
//!
//! A client expands its prompt into a set of candidates that differ only in
//! sensitive attribute values, a server denoises the whole set for the first
//! `k` steps (with attention caching, block skipping and batch attention-map
//! reuse), and the client keeps the latent of its real prompt and finishes the
//! remaining steps locally.

pub mod accel;
pub mod costmodel;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod oblivious;
pub mod pipeline;
pub mod protocol;
pub mod schedule;
pub mod security;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FlopCounter, FlopKind, Rng, Tensor};
