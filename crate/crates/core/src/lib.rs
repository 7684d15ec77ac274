//! Dropped-pronoun aware neural machine translation.
//!
//! The library covers the full desk-scale pipeline: a reverse-mode autodiff
//! engine, an attention-based encoder-decoder, encoder- and decoder-side
//! reconstructors that regenerate pronoun-labelled source sentences, Adadelta
//! training with a two-stage protocol, beam search with reconstruction-score
//! reranking, alignment-based and monolingual pronoun annotation, and a
//! synthetic pro-drop corpus generator with evaluation metrics.

pub mod error;
pub mod graph;
pub mod params;
pub mod rng;
pub mod seq2seq;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use params::ParameterSet;
pub use rng::Rng;
pub use seq2seq::{ModelConfig, Variant};
pub use tensor::Tensor;
