//! Adversarial reinforcement-learning laboratory.
//!
//! The crate trains a hierarchy of two continuous-control sub-policies
//! (nominal and adversarial) under a supervisory master policy whose only
//! observation is a two-dimensional advantage coordinate, alongside a plain
//! single-policy baseline. An `l∞`-bounded observation adversary corrupts the
//! state channel on a fixed-interval or two-state Markov schedule, and the
//! [`analysis`] module evaluates the closed-form bias quantities of that
//! chain exactly.
//!
//! All numeric code is generic over the scalar type via [`Scalar`]
//! (implemented for `f32` and `f64`); the harness and CLI instantiate
//! everything at [`Real`].

pub mod adversary;
pub mod analysis;
pub mod approximator;
pub mod envs;
pub mod error;
pub mod harness;
pub mod mlah;
pub mod ppo;
pub mod rlcore;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default precision for training and the CLI.
pub type Real = f64;

/// [`approximator::ParamSet`] at default precision.
pub type RealParamSet = approximator::ParamSet<Real>;
/// [`approximator::OptState`] at default precision.
pub type RealOptState = approximator::OptState<Real>;
/// [`rlcore::Trajectory`] at default precision.
pub type RealTrajectory = rlcore::Trajectory<Real>;
/// [`ppo::PpoConfig`] at default precision.
pub type RealPpoConfig = ppo::PpoConfig<Real>;
/// [`mlah::Hierarchy`] at default precision.
pub type RealHierarchy = mlah::Hierarchy<Real>;
/// [`analysis::ChainParams`] at default precision.
pub type RealChainParams = analysis::ChainParams<Real>;
