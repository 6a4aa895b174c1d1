pub mod analysis;
pub mod autograd;
pub mod cli;
pub mod benchmark;
pub mod datasets;
pub mod digest;
pub mod distillation;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod objective;
pub mod selftest;
pub mod trainer;

pub use error::{Error, Result, Warned, Warning};
