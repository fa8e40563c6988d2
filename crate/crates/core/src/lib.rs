pub mod align;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod prosody;
pub mod style;
pub mod stylepred;

pub use error::{Error, Result};
