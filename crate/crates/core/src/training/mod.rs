//! Learning machinery: synthetic scenes, the optimizer, single-kernel
//! fitting, segmentation training and the finite-difference oracle.

pub mod fit;
pub mod gradcheck;
pub mod optim;
pub mod scene;
pub mod segment;

pub use fit::{fit_shape, FitOptions, FitProblem, FitResult};
pub use gradcheck::{check_layer, gradcheck, GradcheckOptions, GradcheckReport};
pub use optim::{AdamWConfig, OptimizerState};
pub use scene::{four_class_scene, generate_scene, tile_scene, uniform_cloud, PrimitiveShape, PrimitiveSpec, SyntheticSceneSpec};
pub use segment::{
    segmentation_metrics, train_segmenter, EpochMetrics, LinearHead, SegmentationMetrics, SegmentationOutcome,
    SegmenterOptions, TrainReport,
};
