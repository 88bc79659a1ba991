//! Spatial-spectral transformer for hyperspectral pixel classification with
//! cosine-normalized attention.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure
//! computation: a small dense tensor type with a reverse-mode tape, the
//! attention score family, the patch transformer, the data-side algorithms
//! (patching, splitting, noise, synthetic scenes) and the training loop.
//! File formats, threads and the command line live in the `angleattn` crate.

#![no_std]

extern crate alloc;

pub mod attention;
pub mod autodiff;
pub mod data;
mod error;
pub mod exec;
pub mod gradcheck;
pub mod model;
pub mod param;
mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::{Executor, Sequential};
pub use rng::{derive_seed, seeded};
pub use tensor::Tensor;
