pub mod error;
pub mod evalsuite;
pub mod decodertrain;
pub mod embedpack;
pub mod lexicon;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
