//! Multi-scan multi-body synchronization.
//!
//! Given `K` point clouds of a scene made of `S` independently moving rigid
//! parts, the pipeline recovers multi-way consistent point correspondences
//! (spectral permutation synchronization over a weighted graph connection
//! Laplacian), a consistent motion segmentation (spectral synchronization of
//! pairwise co-membership matrices) and per-part rigid poses (weighted Kabsch),
//! optionally refined over several iterations.
//!
//! Pairwise scene flow, per-point confidence and pairwise segmentation come
//! from deterministic geometric front-ends ([`frontend`]). A seeded synthetic
//! generator ([`scene`]) and an evaluation suite ([`metrics`]) close the loop.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar to `f64`, which is what the file formats
//! and the command line use.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod cloud;
pub mod config;
pub mod error;
pub mod frontend;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod perm_sync;
pub mod pipeline;
pub mod rigid;
pub mod scalar;
pub mod scene;
pub mod seg_sync;
pub mod spectral;

pub use cloud::{FlowField, PairTable, PointCloud, ScanSet};
pub use error::{Error, Result};
pub use geometry::{Mat3, RigidTransform, Vec3};
pub use pipeline::{run_pipeline, IterationState, PipelineConfig, PipelineResult};
pub use rigid::PoseSet;
pub use scalar::Real;
pub use scene::{generate_scene, SceneBundle, SceneConfig};
pub use seg_sync::AbsoluteSegmentation;
pub use spectral::{sym_eigendecomp, EigenPairs, SymmetricMatrix};

/// Scalar used by the file formats and the command line.
pub type Scalar = f64;

pub type Point = Vec3<f64>;
pub type Transform = RigidTransform<f64>;
pub type Cloud = PointCloud<f64>;
pub type Scans = ScanSet<f64>;
pub type Flow = FlowField<f64>;
pub type Poses = PoseSet<f64>;
pub type Segmentation = AbsoluteSegmentation<f64>;
pub type Scene = SceneBundle<f64>;
pub type Run = PipelineResult<f64>;
pub type Symmetric = SymmetricMatrix<f64>;
pub type Spectrum = EigenPairs<f64>;

/// Single-precision variants.
pub type Cloud32 = PointCloud<f32>;
pub type Scans32 = ScanSet<f32>;
pub type Run32 = PipelineResult<f32>;
