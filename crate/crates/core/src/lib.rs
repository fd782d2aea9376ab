//! Attentional encoder-decoder translation with a conditional GRU decoder.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense tensors and a reverse-mode differentiation graph.
//! * [`model`]: factored embeddings, bidirectional GRU encoder, the
//!   conditional GRU with attention, and the deep output layer.
//! * [`training`]: cross-entropy and minimum-risk objectives, optimizers,
//!   recurrent dropout, early stopping and the training loop.
//! * [`metrics`]: smoothed sentence BLEU and metric interpolation.
//! * [`decoding`]: beam search, ensembles, corpus scoring, n-best rescoring.
//! * [`io`]: vocabularies, factored corpora and model archives.
//! * [`viz`]: attention TSV and search-graph DOT emitters.

pub mod decoding;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;
pub mod viz;

mod error;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams};
pub use numerics::{Graph, Tensor, Var};

/// Id of the end-of-sentence token in every vocabulary.
pub const EOS: usize = 0;
/// Id of the unknown-word token in every vocabulary.
pub const UNK: usize = 1;
