pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod nn;
pub mod simulator;
pub mod training;

pub use error::{Error, Result};
