//! Named-entity recognition with a Bi-LSTM-CRF tagger whose token inputs are
//! extended with grammatical features read from positional morphosyntactic tags.

pub mod corpus;
pub mod crf;
pub mod diffcore;
pub mod embeddings;
pub mod eval;
pub mod model;
pub mod synth;
pub mod tagset;
pub mod train;
