//! Simulation and depth reconstruction for single-photon LiDAR.
//!
//! The pipeline turns a photon-count histogram cube into a depth image:
//! [`simulator`] produces cubes from a scene under a Poisson observation
//! model, [`windowing`] and [`shrinkage`] implement the non-learned
//! denoising stages, [`nn`] holds a small residual shrinkage network trained
//! with [`loss`], and [`baselines`] provides the classical estimators.

// Negated comparisons deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod domain;
pub mod error;
pub mod io;
pub mod loss;
pub mod nn;
pub mod pipeline;
pub mod shrinkage;
pub mod simulator;
pub mod tensor;
pub mod windowing;

pub use domain::{
    DepthImage, DetectorConfig, PhotonCube, Prediction, ProbCube, PulseModel, RealCube, Scene,
    SPEED_OF_LIGHT,
};
pub use error::{Error, Result};
pub use tensor::FeatureTensor;
