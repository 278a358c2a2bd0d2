//! Closed-form population gradients for two-layer ReLU teacher-student
//! networks under Gaussian inputs, with critical-point analysis, gradient
//! flow, a multilayer gradient recursion and an experiment runner.
//!
//! Gradients use the per-sample convention
//! `J = 1/2 E[(g(x; W) - g(x; W*))^2]`.

pub mod analytic;
pub mod critical;
pub mod csv;
pub mod empirical;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod geometry;
pub mod multilayer;
pub mod sampling;

pub use analytic::{multi_relu_grad, pg_function, single_relu_grad, weighted_multi_relu_grad};
pub use error::{Error, FieldError, Result};
pub use geometry::{angle, AngleMatrix, DenseVector, UnitVector, WeightSet};
pub use sampling::{InputDistribution, RngSeed, SampleBatch};
