//! Tactile pose estimation on a simulated optical tactile sensor.
//!
//! The crate covers the whole pipeline: a pin-marker sensor simulator
//! ([`sim`]), shear-perturbed dataset generation ([`dataset`]), a small
//! deterministic convolutional network engine ([`nn`]), pose networks built
//! from hyperparameter vectors ([`posenet`]), Tree-structured Parzen
//! Estimator search ([`tpe`]) and PI tactile servoing ([`servo`]).

pub mod cli;
pub mod dataset;
pub mod geom;
pub mod nn;
pub mod pose;
pub mod posenet;
pub mod servo;
pub mod sim;
pub mod tpe;

pub use pose::{
    loss_weights, sample_perturbation, sample_pose, Component, EdgePose, Interval, ObjectType,
    Perturbation, Pose, PoseError, PoseRanges, RigidTransform, SurfacePose,
};
