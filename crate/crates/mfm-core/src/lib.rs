//! Multi-scale flow matching for point cloud generation.
//!
//! The pipeline: build a cluster hierarchy over each training cloud
//! (`geometry`), split generation time across resolution stages
//! (`schedule`), train one velocity model per stage by flow matching
//! (`model`, `training`), and at sampling time integrate coarse-to-fine,
//! hopping between stages with an exact Gaussian bridge (`bridge`,
//! `inference`). Quality is scored with point-set metrics (`metrics`), and
//! datasets live in a preprocessed on-disk store (`dataset`).

pub mod error;
pub mod seeds;

pub mod assignment;
pub mod bridge;
pub mod cloud;
pub mod dataset;
pub mod geometry;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod schedule;
pub mod training;
pub mod verify;

pub use bridge::BridgeCovariance;
pub use cloud::PointCloud;
pub use error::{Error, Result};
pub use geometry::{Hierarchy, HierarchyPair};
pub use inference::{SamplerConfig, VelocityField};
pub use model::{ModelArch, VelocityModel};
pub use schedule::{EndpointPair, StageSchedule};
pub use training::{TrainConfig, TrainReport};
