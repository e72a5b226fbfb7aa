//! Subject-conditioned video generation lab.
//!
//! A desk-scale pipeline: a lossless space-to-depth video codec and toy
//! embedders feed a dual-stream windowed diffusion transformer with dynamic
//! reference-token injection, trained with rectified flow and sampled with
//! dual classifier-free guidance, over a synthetic sprite-video dataset with
//! in-pair / cross-pair reference construction and exact evaluation oracles.

pub mod error;
pub mod dataforge;
pub mod encoders;
pub mod eval;
pub mod fusion;
pub mod mmdit;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
