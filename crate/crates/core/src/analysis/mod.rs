//! Exact checks of the trajectory-matching derivations on enumerable and
//! linear-Gaussian problems, and reward calibration of trained flows.

pub mod calibration;
pub mod entropy;
pub mod mdp;

pub use calibration::{calibrate, spearman, sweep, CalibrationReport, CalibrationSummary, KindSummary};
pub use entropy::{verify_change_of_variables, ChangeOfVariables};
pub use mdp::{
    exact_rkl, random_mdp, random_policy, verify_entropy_decomposition, DiscreteMdp, EntropyDecomposition, PolicyTable,
    RklReport,
};
