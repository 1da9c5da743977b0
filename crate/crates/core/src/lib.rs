pub mod autograd;
pub mod cli;
pub mod data;
pub mod io;
pub mod localize;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pretext;
pub mod separate;
pub mod config;
pub mod conv;
pub mod error;
pub mod fusenet;
pub mod signal;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};

/// Crate version recorded in every artifact manifest.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
