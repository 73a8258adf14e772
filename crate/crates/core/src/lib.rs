pub mod data;
pub mod eval;
pub mod error;
pub mod losses;
pub mod model;
pub mod moco;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
