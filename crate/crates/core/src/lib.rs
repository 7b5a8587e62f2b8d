//! Preference-conditioned generation at desk scale.
//!
//! The crate builds the full pipeline on surrogate models: a simulated
//! preference universe, a layered sequence encoder with a trainable
//! preference discriminator, layer-wise probing that extracts semantic and
//! identity embeddings, MMD-based distribution alignment into a text-feature
//! space, decoupled cross-attention conditioning of a toy denoiser, and the
//! metric suite used to evaluate all of it.

pub mod alignment;
pub mod conditioning;
pub mod encoder;
pub mod optim;
pub mod pipeline;
pub mod probing;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod seeds;
pub mod synth;

pub use error::{Error, Result};
