pub mod autodiff;
pub mod commands;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod layout;
pub mod rankeval;
pub mod tasks;
pub mod transfer;

pub use error::{Error, Result};
