//! Full-waveform inversion with swappable forward-trajectory storage.

pub mod adjoint;
pub mod bench;
pub mod config;
pub mod datagen;
pub mod dias;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod mlp;
pub mod newton;
pub mod prior;
pub mod quant;
pub mod selftest;
pub mod store;
pub mod wave;

pub use error::{Error, Result};
