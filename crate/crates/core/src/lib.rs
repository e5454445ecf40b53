//! Geometric core for sparse-trajectory 4D scene reconstruction.
//!
//! The crate is organized around a motion scaffold: a sparse graph of
//! per-frame SE(3) trajectories that encodes a dense deformation field by
//! dual-quaternion skinning. Around it sit the stages of a monocular
//! reconstruction pipeline that consumes tracked points and depth maps from
//! files instead of running any vision model:
//!
//! - [`se3`]: rigid transforms, dual quaternions, and blending.
//! - [`scaffold`]: the trajectory graph, its topology, and the warp field.
//! - [`priors`]: dataset ingestion and epipolar static/dynamic classification.
//! - [`optim`]: the shared first-order optimizer and gradient checker.
//! - [`camera`]: tracklet-based bundle adjustment of focal, poses, and depth.
//! - [`lift`]: 2D-to-3D track lifting and the geometric scaffold optimization.
//! - [`fusion`]: dynamic Gaussians anchored on the scaffold, fused across time.
//! - [`synth`]: synthetic scene generation used as the verification oracle.
//! - [`metrics`]: trajectory and correspondence evaluation.
//! - [`pipeline`]: the end-to-end driver and its configuration.

pub mod camera;
pub mod config;
mod dual;
pub mod fusion;
mod jac;
pub mod lift;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod priors;
pub mod scaffold;
pub mod se3;
pub mod synth;
#[cfg(test)]
pub(crate) mod testutil;

pub use se3::{RigidTransform, UnitDualQuaternion};
