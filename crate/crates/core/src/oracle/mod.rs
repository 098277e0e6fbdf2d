//! Synthetic corpus with a known generating distribution, and its exact scores.

pub mod corpus;
pub mod gmm;

pub use corpus::{
    expand_positions, expand_tokens, generate_corpus, Corpus, CorpusConfig, EmotionProfile, Manifest, Utterance,
};
pub use gmm::GmmOracle;
