#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod conditioning;
pub mod corpus;
pub mod diffusion;
pub mod disentangle;
pub mod error;
pub mod evaluation;
pub mod feature;
pub mod gradcheck;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
