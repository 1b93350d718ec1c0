//! Compact neural building blocks on top of candle tensors.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod params;
pub mod seq2seq;
pub mod vocab;

pub use layers::{mean_pool, Batch, EncoderConfig, TextEncoder};
pub use params::{Init, Params};
pub use seq2seq::{DecodeConfig, Seq2Seq, Seq2SeqConfig};
pub use vocab::Vocab;
