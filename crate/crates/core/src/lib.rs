//! Bi-ACL: bidirectional autoencoding and contrastive learning for
//! low-resource translation from a bilingual dictionary and target-side
//! monolingual text.
//!
//! All numeric code is generic over [`Scalar`]; the aliases below fix it to
//! `f64`, which is what the command line tool uses.

pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod data;
pub mod decoding;
pub mod dictionary;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, ParamStore, Var};
pub use dictionary::BilingualDictionary;
pub use model::{ModelConfig, Seq2Seq, TokenId};
pub use scalar::Scalar;
pub use training::{AblationMask, TrainConfig};

/// Default scalar.
pub type Float = f64;
pub type Tensor64 = tensor::Tensor<Float>;
pub type Model64 = Seq2Seq<Float>;
pub type Store64 = ParamStore<Float>;
