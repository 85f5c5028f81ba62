#![doc = include_str!("../README.md")]

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod format;
pub mod io;
pub mod model;

pub use error::{Error, FormatError, Result};
pub use format::{ModelFile, ModelKind};
pub use model::LoadedModel;
