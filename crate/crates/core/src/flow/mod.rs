//! Noise-conditioned normalizing flow over state transitions, used as a
//! frozen reward model.

pub mod model;
pub mod noise;
pub mod spline;
pub mod train;

pub use model::{ConditionalFlowModel, FlowConfig, FlowSidecar};
pub use noise::{NoiseConfig, NoiseFamily, Standardizer};
pub use spline::{rq_spline, Direction, SplineKnots};
pub use train::{train_flow, EpochLoss, FlowTrainConfig, FlowTraining};
