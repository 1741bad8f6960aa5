pub mod candmodel;
pub mod cli;
pub mod ctr;
pub mod embstore;
pub mod error;
pub mod metrics;
pub mod minilm;
pub mod model;
pub mod numerics;
pub mod textdata;
pub mod usermodel;

pub use error::{Error, Result};
