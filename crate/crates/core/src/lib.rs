//! Human-preference tooling for text-to-image generation.
//!
//! Preference instances are extracted from chat exports ([`chat_ingest`]),
//! stored and split ([`dataset`]), scored with embedding-based scores
//! ([`scoring`]), used to train a low-rank preference adapter ([`adapter`])
//! and to curate fine-tuning manifests ([`curation`]). [`gen_metrics`] holds
//! the Inception Score and Fréchet distance.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which is what the file formats and
//! the CLI use.

pub mod adapter;
pub mod chat_ingest;
pub mod curation;
pub mod dataset;
pub mod embedding;
pub mod gen_metrics;
pub mod linalg;
pub mod optim;
pub mod scalar;
pub mod scoring;
pub mod shuffle;
pub mod synthetic;

pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type GaussianStats = gen_metrics::GaussianStats<f64>;
pub type ProbMatrix = gen_metrics::ProbMatrix<f64>;
pub type FeatureMatrix = gen_metrics::FeatureMatrix<f64>;
pub type AdapterParams = adapter::AdapterParams<f64>;
pub type AdapterGrad = adapter::AdapterGrad<f64>;
pub type MlpWeights = scoring::MlpWeights<f64>;
pub type ScoredGroup = scoring::ScoredGroup<f64>;
pub type CurationGroup = curation::CurationGroup<f64>;

pub type Matrix32 = linalg::Matrix<f32>;
pub type GaussianStats32 = gen_metrics::GaussianStats<f32>;
pub type AdapterParams32 = adapter::AdapterParams<f32>;
