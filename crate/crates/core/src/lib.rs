//! Numerical core of Geo-RepNet: a small reverse-mode tensor engine, depth
//! priors for attention, the GEMA attention module, re-parameterizable RepVGG
//! blocks, synthetic data, metrics and the training loop.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod dgpg;
pub mod error;
pub mod gema;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod repvgg;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{GeoRepNet, GeoRepNetConfig};
pub use tape::{Tape, Var};
pub use tensor::{DType, Tensor};
