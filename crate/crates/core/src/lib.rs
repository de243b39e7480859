#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod bct;
pub mod codec;
pub mod curation;
pub mod distill;
pub mod dit;
pub mod error;
pub mod nn;
pub mod optim;
pub mod params;
pub mod percep;
pub mod sampler;
pub mod tensor;
pub mod toypc;
pub mod train;
pub mod video;
pub mod world;

pub use error::{Error, Result};
