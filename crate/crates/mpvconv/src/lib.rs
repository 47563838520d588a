//! Point-voxel convolution layers for point-cloud learning, with a small
//! CPU-only training pipeline around them.
//!
//! The layer combines two feature paths over the same points: a voxel path
//! (average-pool voxelization, dense 3-D convolutions, trilinear
//! devoxelization) and a point path (shared MLPs), first in an
//! initialization stage and then in a fusion stage that mixes both. Every
//! op ships its vector-Jacobian product, and the crate carries its own
//! finite-difference harness to verify them.
//!
//! See the `examples/` directory for runnable entry points per capability,
//! and the `mpvconv` binary for the `train`/`eval`/`gradcheck`/`ablate`/
//! `bench` commands.

pub mod checkpoint;
pub mod cloud;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod voxel;

pub use cloud::{normalize_coords, NormalizedCloud, RawCloud};
pub use error::{Error, Result};
pub use layer::{combine_features, CombinationMode, MpvConvConfig, MpvConvLayer};
pub use model::{evaluate, train, Adam, Mpvcnn, MpvcnnConfig, TrainConfig};
pub use nn::{Activation, BatchNormState, Mode, Parameter};
pub use tensor::{DType, Scalar, Tensor};
pub use voxel::{
    devoxelize_trilinear, scale_coords, trilinear_weights, voxelize_avg, ScaledCoords, VoxelGrid,
};
