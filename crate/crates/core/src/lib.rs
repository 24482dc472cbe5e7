//! Language-embedded dynamic Gaussian splatting: scene model, motion bases,
//! a differentiable tile rasterizer, codebook quantization, semantic
//! decoding, point-level localization, training/editing and metrics.

pub mod ablation;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod localization;
pub mod math;
pub mod motion;
pub mod optim;
pub mod quantizer;
pub mod raster;
pub mod scene;
pub mod semantics;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
