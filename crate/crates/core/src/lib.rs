#![no_std]
#![doc = include_str!("../README.md")]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod arch;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod objectives;
pub mod ops;
pub mod qmodel;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{concat_channels, pad_zero, AlphaMatte, Shape, Tensor};
