pub mod acoustic;
pub mod adapter;
pub mod audio;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod generator;
pub mod nn;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
