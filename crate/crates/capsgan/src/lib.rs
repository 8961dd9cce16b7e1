//! File formats (IDX, PGM, the `CGANCKPT` checkpoint container), the
//! training driver and the `capsgan` command line, on top of `capsgan-core`.

pub mod checkpoint;
pub mod cli;
mod error;
pub mod idx;
pub mod pgm;
pub mod run;
pub mod score;

pub use capsgan_core as core;
pub use error::{Error, Result};
