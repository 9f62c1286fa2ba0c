//! Progressive construction of decoder-only language model families.
//!
//! A family is trained smallest-first; each larger member starts from an
//! expanded copy of the previous one and receives only the FLOPs its own
//! scratch budget leaves after the earlier stages.

pub mod budget;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod expansion;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
