pub mod decode;
pub mod error;
pub mod estimator;
pub mod evalkit;
pub mod frames;
pub mod gradsuite;
pub mod handmodel;
pub mod iksolver;
pub mod mvs;
pub mod skeleton;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
