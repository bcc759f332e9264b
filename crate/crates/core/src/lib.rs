//! Recurrent limited-view CT reconstruction.
//!
//! The crate bundles parallel-beam projection operators, sparse-view and
//! limited-angle sampling, synthetic phantoms, a small reverse-mode tensor
//! engine, the RedSCAN attention network, the sinogram consistency layer and
//! the recurrent training loop, plus file formats and a command line tool.

pub mod cli;
pub mod error;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod projector;
pub mod redscan;
pub mod sampling;
pub mod scl;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
