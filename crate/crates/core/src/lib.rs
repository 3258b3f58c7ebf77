//! Physics-informed precipitation nowcasting.

pub mod cli;
pub mod error;
pub mod grid;
pub mod ingest;
pub mod linalg;
pub mod physics;
pub mod pid;
pub mod synth;
pub mod tensor;
pub mod transformer;
pub mod verify;
pub mod vqgan;

pub use error::{Error, Result};
