//! Segmented consistency distillation on a two-dimensional toy diffusion problem.
//!
//! The data distribution is a Gaussian mixture whose diffused score is known in
//! closed form, so every stage of the acceleration pipeline can be checked
//! against an exact oracle:
//!
//! - [`schedule`]: variance-preserving noise schedules, timestep grids and
//!   segment-boundary arithmetic.
//! - [`denoiser`]: a small ε-prediction MLP with exact reverse-mode gradients,
//!   EMA shadows and low-rank adapters.
//! - [`solver`]: the DDIM step, classifier-free guidance and the ODE and
//!   multistep consistency samplers.
//! - [`oracle`]: the analytic mixture (samples, scores, optimal ε).
//! - [`distill`]: PD / CD / CTM / segmented CD objectives, the discriminator and
//!   the staged training loops.
//! - [`enhance`]: distribution-matching one-step enhancement.
//! - [`feedback`]: preference pairs, reward models and reward feedback fine-tuning.
//! - [`eval`]: sliced Wasserstein, MMD, mode coverage and CSV reports.
//! - [`checkpoint`] and [`config`]: persistence and experiment configuration.

pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod distill;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod feedback;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod solver;

pub use denoiser::{Cond, Denoiser, DenoiserConfig, DenoiserParams, LoraAdapter, Student};
pub use error::{Error, Result};
pub use oracle::{AnalyticTeacher, GmmSpec};
pub use schedule::{NoiseSchedule, ScheduleKind, SegmentSchedule, TimestepGrid};
pub use solver::EpsModel;
