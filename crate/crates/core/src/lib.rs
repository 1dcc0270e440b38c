//! Imitation learning from state-only demonstrations.
//!
//! A noise-conditioned rational-quadratic spline flow is fitted to expert
//! state transitions; its log-density becomes a frozen reward that a
//! finite-horizon soft actor-critic agent maximizes.

pub mod analysis;
pub mod counter;
pub mod data;
pub mod envs;
pub mod error;
pub mod flow;
pub mod numcore;
pub mod parallel;
pub mod pipeline;
pub mod policy;
pub mod seeding;

pub use data::{DatasetKind, Trajectory, TrajectorySet, TransitionDataset};
pub use envs::{Controller, DoubleIntegrator, EnvSpec, EnvState, Environment};
pub use error::{Error, Result};
pub use numcore::{Graph, ParamStore, Tensor, Var};
pub use pipeline::{load_config, Run, RunConfig, RunSelection};
