//! State-space sequence layers with parameter-efficient fine-tuning adapters.

pub mod adapters;
pub mod analysis;
pub mod cli;
pub mod diffmath;
pub mod error;
pub mod io;
pub mod model;
pub mod ssm;
pub mod tasks;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
