//! Pose distribution estimation from keypoint heatmaps.
//!
//! A stack of per-keypoint heatmaps (marginal probabilities of each keypoint's
//! projection in an image crop) defines an implicit, unnormalized likelihood
//! over object pose: project the model keypoints under a candidate pose and
//! look up each projection in its heatmap. This crate evaluates that likelihood
//! over a dense equivolumetric grid on SO(3) crossed with a small translation
//! grid, normalizes it, marginalizes the translations away, and scores ground
//! truth rotations against the resulting distribution.
//!
//! Module map:
//! - [`rotation_grid`]: HEALPix sphere pixelization, the Hopf-fibration
//!   rotation grid, geodesic metrics and nearest-sample queries.
//! - [`projection`]: pinhole/crop camera model and farthest-point keypoint
//!   selection.
//! - [`heatmap`]: heatmap stacks, log lookups, binary I/O and a synthetic
//!   Gaussian heatmap generator.
//! - [`distribution`]: batch likelihood evaluation, normalization,
//!   marginalization and scoring.
//! - [`harness`]: scene configuration and the command implementations behind
//!   the `posedist` binary.

pub mod distribution;
pub mod error;
pub mod harness;
pub mod heatmap;
pub mod projection;
pub mod rotation_grid;

pub use distribution::{
    entropy, evaluate_grid, log_likelihood_of, marginalize_rotation, mean_log_likelihood,
    mode_masses, unnormalized_log_likelihood, Approximation, MeanLogLikelihood, Mode,
    PoseDistribution, RotationDistribution, TranslationGrid,
};
pub use error::{Error, Result};
pub use heatmap::{synthesize_heatmaps, HeatmapStack, Interpolation, SymmetrySet};
pub use projection::{
    farthest_point_sample, project_keypoints, CameraIntrinsics, KeypointSet, Pose,
};
pub use rotation_grid::{
    build_rotation_grid, geodesic_distance, healpix_centers, nearest_sample, Rotation,
    RotationGrid, SphereGrid,
};
