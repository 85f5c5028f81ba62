use alloc::string::String;

use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("cannot allocate tensor of shape {0}: element count overflows")]
    Alloc(Shape),
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("architecture mismatch: expected hash {expected:016x}, found {found:016x}")]
    ArchMismatch { expected: u64, found: u64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
