pub mod data;
pub mod error;
pub mod inference;
pub mod io;
pub mod likelihood;
pub mod model;
pub mod smoothing;
pub mod sampler;
pub mod simulate;
pub mod spatial;
pub mod state;

pub use error::{Error, Result};
