//! Anonymization prompt learning on a synthetic identity world.

pub mod apl;
pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod metrics;
pub mod personalize;
pub mod recognizer;
pub mod seed;
pub mod synthworld;
pub mod textenc;
pub mod transfer;

pub use error::{AplError, Result};
