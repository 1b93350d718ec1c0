//! Dense passage retrieval with a two-tower encoder.

pub mod encoder;
pub mod index;
pub mod loss;
pub mod train;
pub mod vanilla;

pub use encoder::{BiEncoder, BiEncoderConfig, Tower};
pub use index::{dot_similarity, DenseIndex, IndexManifest, RetrievalResult};
pub use loss::KlDirection;
pub use train::{
    checkpoint_path, train_retriever, EpochLog, PhaseReport, RetrieverData, RetrieverTrainConfig, Teacher,
};
pub use vanilla::VanillaGenerator;
