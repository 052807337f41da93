//! A desk-scale laboratory for guided diffusion sampling.
//!
//! The crate trains a small conditional noise predictor on a labeled 2-D
//! Gaussian mixture and compares guidance strategies at sampling time:
//! classifier-free guidance (CFG), its denoised-space variant (CFG++),
//! negated CFG, dynamic negative guidance (DNG), and contrastive CFG in
//! positive and negative mode. Everything runs in `f64` on the CPU and is
//! deterministic under fixed seeds.
//!
//! Module map:
//! - [`schedule`] — discrete diffusion time grid and noise-level arithmetic
//! - [`net`] — minimal MLP with manual backprop and an Adam optimizer
//! - [`model`] — the conditional epsilon predictor and its training loop
//! - [`guidance`] — guidance strategies, NCE/SDS losses, coefficient curves
//! - [`sampler`] — deterministic DDIM, noise-space and posterior-mean loops
//! - [`data`] — the three-node mixture and its analytic class oracle
//! - [`metrics`] — error rate, node occupancy, sliced Wasserstein, log-lik
//! - [`checkpoint`] — binary model persistence

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod model;
pub mod net;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use data::{LabeledPoint, MixtureSpec};
pub use error::{Error, Result};
pub use guidance::{DngState, GuidanceSpec};
pub use metrics::RunReport;
pub use model::{Condition, EpsModel, TrainConfig};
pub use sampler::{SampleRun, SampleSet, Variant};
pub use schedule::Schedule;
