//! Vision-free hand and arm retargeting for dexterous teleoperation: parametric
//! human skeletons, a differentiable robot-hand energy, learned and
//! optimization-based retargeters, command smoothing and a dataflow pipeline.

pub mod body_retarget;
pub mod collision;
pub mod config;
pub mod control;
pub mod energy;
pub mod error;
pub mod evaluation;
pub mod human_model;
pub mod kinematics;
pub mod models;
pub mod network;
pub mod pipeline;
pub mod retargeter;
pub mod se3;

pub use error::{Error, Result};
