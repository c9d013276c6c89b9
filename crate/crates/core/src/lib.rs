//! Presentation attack detection for post-mortem iris images.
//!
//! The pipeline: annotated NIR captures are cropped and masked around the iris
//! ([`preprocess`]), scored by a VGG-16-topology live/post-mortem classifier
//! ([`model`]) whose attention is audited with Grad-CAM ([`explain`]), and
//! evaluated over subject-disjoint splits ([`dataset`], [`eval`]). Image quality
//! covariates are in [`quality`]; [`synth`] generates a stand-in corpus.
//!
//! The network engine is generic over its element type ([`Scalar`]); concrete
//! aliases for `f32` and `f64` are exported below.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod explain;
pub mod filter;
pub mod image;
pub mod model;
pub mod nn;
pub mod plot;
pub mod preprocess;
pub mod pretrain;
pub mod quality;
pub mod scalar;
pub mod stats;
pub mod synth;

pub use dataset::{Dataset, Eye, IrisAnnotation, Label, SampleRecord, SplitSpec};
pub use error::{Error, Result};
pub use image::Image;
pub use scalar::Scalar;

pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
pub type Model32 = model::TrainedModel<f32>;
pub type Model64 = model::TrainedModel<f64>;
pub type NetworkInput32 = preprocess::NetworkInput<f32>;
pub type NetworkInput64 = preprocess::NetworkInput<f64>;
