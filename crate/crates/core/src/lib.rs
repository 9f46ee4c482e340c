pub mod analysis;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod datasets;
pub mod diffeng;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod layer;
pub mod objective;
pub mod par;
pub mod potential;
pub mod quadrature;
pub mod trainer;

pub use error::{Error, Result};
