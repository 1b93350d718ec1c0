//! Cross-encoder reranking of retriever candidates.

pub mod loss;
pub mod model;
pub mod sampler;
pub mod train;

pub use loss::{infonce_loss, Similarity};
pub use model::{order_candidates, sigmoid, CrossEncoder, CrossEncoderConfig, RerankCandidate};
pub use sampler::NegativeSampler;
pub use train::{
    build_pools, read_pools, train_reranker, write_pools, Pool, RerankerData, RerankerReport, RerankerTrainConfig,
};
