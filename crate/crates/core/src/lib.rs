//! Limited-label bearing fault diagnosis: wavelet time-frequency maps, a
//! Vision Transformer encoder trained by self-distillation (DINO), and a
//! temperature-weighted KNN evaluator.

pub mod error;
pub mod rng;
pub mod signal;
pub mod tensor;
pub mod tfm;
pub mod vit;
pub mod projector;
pub mod model;
pub mod dino;
pub mod knn;
pub mod config;
pub mod pipeline;

pub use error::{Error, Result};
