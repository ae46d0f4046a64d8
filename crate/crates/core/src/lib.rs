pub mod error;
pub mod linalg;
pub mod model;
pub mod riccati;
pub mod sim;
pub mod table;
pub mod functionals;
pub mod capacity;
pub mod nash;
pub mod renewables;
pub mod cli;

pub use error::{Error, Result};
