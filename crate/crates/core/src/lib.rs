//! Holistic robot pose estimation toolkit.
//!
//! Forward kinematics over URDF-subset robot descriptions, the 6D rotation
//! representation, pinhole projection with root-depth decomposition, voxel
//! soft-argmax, the supervision losses, ADD/AUC metrics, a deterministic
//! synthetic scene generator and a Levenberg–Marquardt estimator that
//! recovers joint states and camera-to-robot pose from keypoint observations.

pub mod camera;
pub mod heatmap;
pub mod kinematics;
pub mod render;
pub mod rotation;
pub mod fmt;
pub mod losses;
pub mod metrics;
pub mod synth;
pub mod estimator;
