//! Few-shot classification with class prototypes produced by gated graph
//! propagation over one or more class-correlation graphs, ensembled at the
//! score level.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the command-line tool and the tests.

pub mod classifier;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod kgem;
pub mod kgtm;
pub mod matrix;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type CorrelationGraph64 = graph::CorrelationGraph<f64>;
pub type DistanceMatrix64 = graph::DistanceMatrix<f64>;
pub type EmbeddingMatrix64 = graph::EmbeddingMatrix<f64>;
pub type KgtmParams64 = kgtm::KgtmParams<f64>;
pub type KgtmParams32 = kgtm::KgtmParams<f32>;
pub type PrototypeSet64 = kgtm::PrototypeSet<f64>;
pub type FewShotDataset64 = data::FewShotDataset<f64>;
pub type FewShotDataset32 = data::FewShotDataset<f32>;
pub type KgtnModel64 = training::KgtnModel<f64>;
pub type KgtnModel32 = training::KgtnModel<f32>;
