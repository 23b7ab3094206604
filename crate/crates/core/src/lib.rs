//! Global-context convolutional features with prototypical and matching
//! few-shot heads, on a small tape-based autodiff engine.

pub mod autodiff;
pub mod classify;
pub mod config;
pub mod data;
pub mod encoder;
pub mod episodic;
pub mod error;
pub mod fewshot;
pub mod gc;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod optim;
pub mod oracle;
pub mod report;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
