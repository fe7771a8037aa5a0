//! Nested-embedding loss kernels, level-wise reciprocal agglomerative
//! clustering, evaluation metrics and cluster keyword extraction.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[cfg(feature = "cli")]
pub mod cli;
pub mod error;
#[cfg(feature = "cli")]
pub mod io;
pub mod linalg;
pub mod loss;
pub mod keywords;
pub mod metrics;
pub mod model;
pub mod rac;
pub mod synth;

pub use error::{Error, Result};
pub use model::{
    binarize_label, prefix_cosine, validate_dataset, DatasetReport, EmbeddingMatrix, LabeledPair, LossConfig,
    PairTarget, PrefixLevel, PrefixScheme, SimilarityLabel,
};
