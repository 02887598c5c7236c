//! CaRE-style encoders and the convolutional tail predictor.
//!
//! NPs are encoded as the mean of the raw embeddings of their gold cluster,
//! relation phrases by a bidirectional GRU over word embeddings, and the
//! predicted tail vector `t_C` by a ConvE-style network over the stacked
//! head and relation encodings. `ψ_PRED(t) = t_C · encode_np(t)`.

mod config;
mod network;
mod vocab;

pub use config::{ContextSpec, ModelConfig, NpInit, TypeScoreVariant, WordInit};
pub use network::{BnUpdate, Binder, CareNetwork, Mode};
pub use vocab::{InitVectors, PhraseVocab, UNK_WORD};
pub(crate) use network::uniform as uniform_init;
