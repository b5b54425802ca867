pub mod cli;
pub mod error;
pub mod forward;
pub mod inversion;
pub mod laplace;
mod lsq;
pub mod mlf;
pub mod quad;
pub mod signal;
pub mod spectrum;
pub mod verifier;

pub use error::{Error, Result};
