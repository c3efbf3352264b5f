pub mod config;
pub mod error;
pub mod field;
pub mod fit;
pub mod imaging;
pub mod io;
pub mod loss;
pub mod priors;
pub mod radiative;
pub mod render;
pub mod sampler;
pub mod scene;
pub mod synth;

pub use error::{Error, Result};
