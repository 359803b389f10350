//! Scale-aligned domain generalization (SADG) for binary image recapture
//! detection, at desk scale.
//!
//! The crate bundles everything an experiment needs: a small reverse-mode
//! autodiff engine ([`tensor`]), the feature generator / domain discriminator /
//! task network trio ([`models`]), the composite training objective
//! ([`losses`]), a procedural multi-domain corpus ([`synth`]), balanced
//! multi-domain batching ([`sampler`]), the optimizer and training loop
//! ([`trainer`]), evaluation metrics ([`eval`]) and the experiment grid
//! driver ([`experiment`]).

pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use tensor::{Tape, Tensor, TensorError, Var};
