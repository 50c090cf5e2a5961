//! Siamese self-expressive subspace clustering.

pub mod assignment;
pub mod autodiff;
pub mod dataio;
pub mod edsc;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod numerics;
pub mod siamese;
pub mod spectral;
pub mod sscn;
pub mod stiefel;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngState};
