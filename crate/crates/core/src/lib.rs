//! Non-intrusive load monitoring from image load signatures.
//!
//! The pipeline turns synchronised bus current/voltage recordings into
//! per-cycle multimodal sequences, encodes each cycle as a three-channel
//! learned image signature, classifies the set of running appliances with a
//! small CNN, keeps learning new appliances under an elastic-weight penalty,
//! and splits aggregate power into per-appliance components.

pub mod bench;
pub mod decompose;
pub mod error;
pub mod eval;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod signature;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
