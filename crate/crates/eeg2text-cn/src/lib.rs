//! EEG-to-Chinese-text pipeline.
//!
//! The crate covers the full desk-scale workflow: corpus interchange files,
//! PCA channel compression, a convolutional + transformer encoder-decoder
//! trained with teacher forcing, greedy character decoding, and a
//! character-level smoothed BLEU evaluator. The `eeg2text-cn` binary wires
//! the stages together; everything it does is also callable through
//! [`pipeline`].

pub mod bleu;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod model;
pub mod pca;
pub mod pipeline;
pub mod preprocess;
pub mod textcodec;
pub mod training;

pub use error::{Error, Result};
