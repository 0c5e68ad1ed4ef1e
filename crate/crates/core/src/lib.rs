//! Canary selection, crafting and privacy auditing for differentially
//! private training of small models.

pub mod accountant;
pub mod audit;
pub mod bilevel;
pub mod data;
pub mod error;
pub mod influence;
pub mod leastsq;
pub mod linalg;
pub mod model;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use data::{Dataset, Sample, SynthKind, Task};
pub use error::{Error, Result};
pub use model::{Activation, Arch, ModelState};
