//! LoGDesc: hybrid local-geometry / learned descriptors for rigid point
//! cloud registration.
//!
//! The pipeline couples handcrafted per-point geometry (anisotropy,
//! planarity, omnivariance, local reference frames, triangle-fan normals)
//! with a small learned stack (shared pointwise convolutions, rotary
//! self-attention, normal-conditioned cross attention), entropic
//! optimal-transport matching, and robust pose estimation (Kabsch SVD,
//! farthest-sampling-guided registration, feature-space RANSAC).
//!
//! Modules:
//! - [`geometry`]: clouds, kd-tree search, covariance analysis, LRFs,
//!   normals, rigid transforms, farthest point sampling.
//! - [`nn`]: minimal dense-tensor reverse-mode autodiff core and Adam.
//! - [`descriptor`]: the per-point feature stack (f0/f1/f2, CNN + rotary
//!   self-attention).
//! - [`transformer`]: inter/intra-cloud conditioning with normal-angle
//!   embeddings.
//! - [`matching`]: similarity scores, log-domain Sinkhorn with dustbins,
//!   mutual-best assignment.
//! - [`pose`]: Kabsch, FSR, and RANSAC estimators.
//! - [`datagen`]: synthetic shapes and the benchmark corruption protocol.
//! - [`metrics`]: rotation/translation errors and matching statistics.
//! - [`io`]: cloud file formats, checkpoints, structured records.
//! - [`model`] / [`pipeline`]: the assembled network and end-to-end runs.

pub mod datagen;
pub mod descriptor;
pub mod geometry;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pose;
pub mod transformer;

pub use geometry::{LocalGeometry, NeighborhoodIndex, PointCloud, RigidTransform};
pub use matching::MatchSet;
pub use pose::PairedPoints;
