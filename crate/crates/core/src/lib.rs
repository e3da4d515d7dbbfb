//! Dependency-based semantic role labeling with iterative structured
//! refinement.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`graph`], [`params`], [`optim`], [`gradcheck`] and
//!   [`checkpoint`] form a small reverse-mode autodiff stack with Adam and
//!   a single-file tensor container.
//! * [`conll`] and [`vocab`] read and write CoNLL-2009 data.
//! * [`encoder`] embeds sentences and runs the highway BiLSTM and MLP
//!   feature extractors.
//! * [`baseline`] is the factorized biaffine role and sense scorer.
//! * [`refiner`] holds the structured and self-refinement networks;
//!   [`bundle`] pairs trained networks with their vocabulary.
//! * [`train`] implements two-stage training with Gumbel perturbation and
//!   softmax-margin losses.
//! * [`eval`] scores predictions and analyses constraint violations.
//! * [`synth`] generates synthetic corpora with argument interactions.

pub mod baseline;
pub mod bundle;
pub mod checkpoint;
pub mod conll;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod refiner;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
