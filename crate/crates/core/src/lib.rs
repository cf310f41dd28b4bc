//! Explanation toolkit for precipitation-nowcasting segmentation models.
//!
//! The crate bundles a synthetic radar-scenario generator, a small
//! encoder–decoder nowcasting network with a rainfall-type classifier,
//! dual-threshold forecast verification, gradient-based attribution with a
//! deletion fidelity benchmark, post-hoc confidence calibration, and the run
//! store and API that serve all of it to a forecaster dashboard.

pub mod attribution;
pub mod calibration;
pub mod datagen;
pub mod error;
pub mod grdf;
pub mod grid;
pub mod model;
pub mod net;
pub mod service;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{
    argmax_class, rain_to_classes, softmax, ClassGrid, ConfidenceGrid, FusedInput, LogitGrid,
    ProbGrid, RainClass, RainField, Tensor, ValidityMask,
};
pub use net::{forward_with_gradient, Architecture, NetworkParams, Op, ScalarTarget};
