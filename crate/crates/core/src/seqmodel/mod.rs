//! Recurrent next-token model over unified profiles, plus hot-set
//! extraction from generated sequences.

pub mod hotset;
pub mod model;
pub mod rnn;
pub mod train;
pub mod vocab;

use thiserror::Error;

pub use hotset::{call_counts, evaluate, hot_set, Evaluation, HotClass, HotSetPrediction};
pub use model::{ModelInfo, Precision, RnnModel};
pub use rnn::{Grads, Real, Rnn};
pub use train::{corpus, train, train_tokens, TrainConfig, TrainReport};
pub use vocab::{Token, Vocab};

#[derive(Debug, Error)]
pub enum SeqError {
    #[error("token {0} is not in the model vocabulary")]
    UnknownToken(String),
    #[error("corpus has {0} tokens, need at least 2")]
    DegenerateCorpus(usize),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("model file: {0}")]
    ModelFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
