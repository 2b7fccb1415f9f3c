//! Token-gated multiplicative low-rank adaptation at desk scale.
//!
//! The crate is `no_std` (with `alloc`): everything here is pure
//! computation. File formats, configuration files and the command-line
//! front end live in the `gatera-lab` companion crate.
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod adapters;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
