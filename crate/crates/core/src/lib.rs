//! Learnable geometric inductive-bias kernels for 3D point clouds.
//!
//! Each point of a cloud is treated as a query. Its neighbors at several
//! radii are scored by eight parametric radial-basis kernels (solid and
//! hollow cylinders, cones, disks and ellipsoids), each with its own learned
//! orientation and shape. Scores are mean-centered with a Monte-Carlo
//! estimate over the neighborhood ball, mixed into composite biases by a
//! learned matrix, concatenated with the input features and projected. Every
//! learnable parameter has an analytic gradient.

pub mod bench;
pub mod cli;
pub mod composite;
pub mod error;
pub mod geometry;
pub mod io;
pub mod kernels;
pub mod layer;
pub mod neighborhood;
pub mod normalization;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{CanonicalOffset, Mat3, RotationAngles, Vec3};
pub use kernels::{GibGrad, GibKind, GibParams};
pub use layer::{ForwardPass, GiblyConfig, GiblyLayer, LayerGrads};
pub use neighborhood::{NeighborhoodIndex, PointCloud, ScaleSchedule};

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}
