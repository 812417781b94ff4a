pub mod align;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod objective;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};
