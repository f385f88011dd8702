pub mod container;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod numeric;
pub mod objective;
pub mod projection;
pub mod synth;
pub mod transformer;

pub use error::{Error, Result};
