//! File formats, threads and the command line around `angleattn-core`.
//!
//! Scenes are NPY files (`<f4` cubes of shape (H, W, C), `<u2` label rasters
//! of shape (H, W)); class maps are binary PPM. Checkpoints are directories of
//! `<f8` NPY tensors with a JSON manifest.

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod npy;
pub mod raster;
pub mod threads;

pub use error::{Error, Result};
