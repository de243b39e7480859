//! Files, training runs and the command line around `physjoint_core`.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod plot;
pub mod stages;

pub use error::{Error, Result};
