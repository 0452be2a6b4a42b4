//! Similarity-aware fusion of RGB-D image features and point clouds for
//! semantic segmentation, at a scale that trains on a single CPU.

pub mod checkpoint;
pub mod chunks;
pub mod context;
pub mod csm;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gsm;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod projection;
pub mod segment;
pub mod spatial;
pub mod synth;
pub mod train;
pub mod views;

pub use error::{Error, Result};
pub use model::{CameraIntrinsics, FeatureTable, Point3, PointCloud, RgbdFrame, RigidPose, SceneBundle, NO_LABEL};
