//! Curation engine for large-face-angle video corpora.
//!
//! The crate covers the whole data path from per-frame face annotations to an
//! identity-disjoint train/test split:
//!
//! * [`manifest`] reads and writes the on-disk artifacts (JSON Lines manifests,
//!   the binary embedding store, reports).
//! * [`constraints`] applies frame subsampling and the face count, face
//!   proportion and pose diversity filters.
//! * [`consistency`] scores per-clip identity coherence from pairwise cosine
//!   similarities of identity embeddings.
//! * [`index`] is an IVF-PQ approximate nearest-neighbour index (k-means coarse
//!   quantizer, residual product quantization, ADC search).
//! * [`clustering`] groups samples into identities with a two-threshold
//!   hierarchical pass and splits identities into train and test sets.
//! * [`mofe`] is a numeric reference for the mixture-of-facial-experts fusion
//!   block with analytic gradients.
//! * [`pipeline`] and [`synth`] compose the stages and generate labelled
//!   synthetic corpora.
//!
//! Numeric kernels are generic over [`Scalar`]; the aliases below pin the
//! precisions the pipeline actually runs at.

pub mod clustering;
pub mod consistency;
pub mod constraints;
pub mod error;
pub mod index;
pub mod manifest;
pub mod mofe;
pub mod pipeline;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Similarity matrices are accumulated in double precision.
pub type SimilarityMatrix = consistency::SimilarityMatrix<f64>;
/// MoFE parameters at the precision used for gradient checking.
pub type MofeParams = mofe::MofeParams<f64>;
/// MoFE parameters at storage precision.
pub type MofeParamsF32 = mofe::MofeParams<f32>;
/// Dense row-major matrix used by the MoFE block.
pub type Matrix = mofe::Matrix<f64>;
/// Gradients of a MoFE forward pass.
pub type MofeGrads = mofe::MofeGrads<f64>;
