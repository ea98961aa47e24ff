//! SVD-structured LoRA mixture-of-experts layers.

pub mod accounting;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod layer;
pub mod linalg;
pub mod oracles;
pub mod report;
pub mod routing;
pub mod spectral;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
