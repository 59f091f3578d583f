//! Self-guiding multimodal LSTM captioning pipeline: tokenization and
//! vocabulary handling, a peephole multimodal LSTM with hand-derived
//! gradients, RMSProp training, beam-search decoding, guiding-feature
//! extraction, and caption evaluation metrics.

pub mod decoding;
pub mod error;
pub mod features;
pub mod fixture;
pub mod guidance;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod text;
pub mod training;
pub mod util;
