pub mod cli;
pub mod data;
pub mod decoder;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod model;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use model::SeqBattNet;
