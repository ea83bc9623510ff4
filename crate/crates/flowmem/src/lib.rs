//! Rectified-flow training and memorization analysis on synthetic patches.
//!
//! The crate trains small MLP velocity fields with conditional flow matching
//! and measures how much they memorize their training split:
//!
//! - [`tape`] / [`tensor`]: a dense f64 tensor and a reverse-mode tape,
//!   enough autodiff to train the network and probe input Jacobians.
//! - [`model`]: the MLP velocity field `v(x, t)` with a sinusoidal time
//!   embedding, plus the [`model::VelocityField`] trait that lets analysis
//!   code run against analytic stub fields.
//! - [`data`]: band-limited Gaussian patch datasets with per-sample cutoff
//!   frequencies, giving a controllable compressed-size (complexity) axis.
//! - [`flow`]: interpolation paths (rectified flow and OT-CFM), uniform and
//!   symmetric-exponential timestep samplers, and the training loop.
//! - [`mia`]: membership-inference statistics (single-noise, Monte-Carlo
//!   averaged, and complexity-calibrated variants) over a frozen model.
//! - [`lmmse`]: the closed-form linear (LMMSE) velocity baseline and the
//!   nonlinearity gap against it.
//! - [`likelihood`]: exact ODE log-likelihoods with Hutchinson or exact
//!   trace accumulation.
//! - [`metrics`]: ROC/AUC, TPR at fixed FPR, correlations, and an MMD
//!   two-sample fidelity proxy.

mod binio;

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fields;
pub mod flow;
pub mod likelihood;
pub mod lmmse;
pub mod metrics;
pub mod mia;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{MlpVelocityModel, VelocityField};
pub use tensor::Tensor;
