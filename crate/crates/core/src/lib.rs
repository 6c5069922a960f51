pub mod conditioner;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod flow;
pub mod grpo;
pub mod hia;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod reward;
pub mod sprite;
pub mod svg;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
