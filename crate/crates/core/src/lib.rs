//! ITO at desk scale: a dual-encoder contrastive model with multimodal
//! multiple alignment and a training-time fusion transformer, built on an
//! in-crate autodiff engine so every gradient is verifiable against finite
//! differences.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
