pub mod cli;
pub mod data;
pub mod distributions;
pub mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod par;
pub mod rng;
pub mod simulate;
pub mod underreporting;
pub mod weights;

pub use error::{Error, Result};
