//! Decoupled open-set detection head: a text adaptor into a joint space,
//! vocabulary re-parameterization into 1×1 conv kernels, box decoding, label
//! assignment and losses, toy training, quantization, and benchmarking.

pub mod adaptor;
pub mod assign;
pub mod bench;
pub mod boxes;
mod codec;
pub mod embedding_io;
pub mod error;
pub mod featblob;
pub mod head;
pub mod pipeline;
pub mod quant;
pub mod selfcheck;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use adaptor::{AdaptorConfig, AdaptorParams};
pub use embedding_io::EmbeddingMatrix;
pub use error::{Error, Result};
pub use head::{Classifier, FeatureMap, ScoreMap, VocabularyPack};
