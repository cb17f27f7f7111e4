pub mod attention;
pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod lagged;
pub mod linear;
pub mod model;
pub mod pca;
pub mod prep;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
