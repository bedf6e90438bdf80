//! Frozen-language-model multimodal adaptation: a reverse-mode tensor substrate, a
//! closed synthetic shapes world, four tower variants sharing a frozen text stack,
//! flow-matching image generation and the two-stage training loop.
//!
//! The crate is `no_std` + `alloc` when the default `std` feature is disabled.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParameterSet};
pub use real::{DType, Real};
pub use rng::RngStream;
pub use tensor::Tensor;
