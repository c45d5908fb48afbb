//! Simulation and verification laboratory for critical branching processes
//! in i.i.d. random environments.

pub mod branching;
pub mod conditioned;
pub mod error;
pub mod experiment;
pub mod gf;
pub mod offspring;
mod plot;
pub mod rng;
pub mod stats;
pub mod walk;

pub use error::{Error, Result};
