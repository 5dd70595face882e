pub mod error;
pub mod baselines;
pub mod checkpoint;
pub mod cohortgen;
pub mod config;
pub mod encoder;
pub mod harness;
pub mod heads;
pub mod io;
pub mod mlm;
pub mod numkit;

pub use error::{Error, Result};
pub use config::Config;
