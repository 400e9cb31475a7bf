pub mod baseline;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod nn;
pub mod ogm;
pub mod seq2seq;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
