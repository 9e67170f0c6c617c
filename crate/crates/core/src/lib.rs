//! Robust identification of nonlinear systems from adversarially corrupted
//! trajectories: simulators, attack models, kernel features, norm-based
//! estimators, theory checks and an experiment harness.

pub mod adversary;
pub mod dynamics;
pub mod error;
pub mod estimators;
pub mod features;
pub mod harness;
pub mod linalg;
pub mod rng;
pub mod theory;

pub use adversary::{AttackPolicy, InputPolicy};
pub use dynamics::{simulate, Activation, SystemSpec, Trajectory};
pub use error::{Error, Result};
pub use estimators::{solve, Backend, EstimateReport, Norm, RegressionProblem, SolverConfig};
pub use features::{fit_ground_truth, BasisSet, GroundTruth, GroundTruthConfig};
pub use theory::{CheckReport, LowerBoundInstance};
