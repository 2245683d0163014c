//! Policy search for infinite-horizon discounted MDPs by trans-dimensional
//! MCMC.
//!
//! The crate samples a reward-weighted joint distribution over variable
//! length trajectories and policy parameters with reversible-jump moves,
//! working in the exogenous-noise parameterization so states are derived
//! deterministically. Simulated annealing over a replicated joint
//! concentrates the policy marginal on its maxima, and average-linkage
//! clustering of the plateau samples yields the point estimate. Two
//! benchmark environments (linear-Gaussian control and a repeller particle
//! system) and two baselines (frozen-scenario gradient search and a direct
//! state-space chain) round out the toolkit.
//!
//! All numeric code is generic over the [`Scalar`] floating-point type;
//! the aliases below fix the common concrete choices.

pub mod cluster;
pub mod envs;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod pegasus;
pub mod sampler;
pub mod scalar;
pub mod statespace;
pub mod target;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use cluster::{point_estimate, upgma_cluster, ClusterResult, PointEstimateMethod};
pub use model::{
    recompute_suffix, rollout_from_noise, Environment, NoiseStep, PolicyParams, Trajectory,
};
pub use sampler::{run_chain, SampleLog, SamplerConfig};
pub use statespace::{statespace_chain, StateSpaceConfig};
pub use target::{RewardVariant, TargetKind, ThetaPrior};

/// `f64` concrete types (the default precision).
pub type Trajectory64 = model::Trajectory<f64>;
pub type NoiseStep64 = model::NoiseStep<f64>;
pub type PolicyParams64 = model::PolicyParams<f64>;
pub type ThetaPrior64 = target::ThetaPrior<f64>;
pub type SamplerConfig64 = sampler::SamplerConfig<f64>;
pub type StateSpaceConfig64 = statespace::StateSpaceConfig<f64>;
pub type PegasusConfig64 = pegasus::PegasusConfig<f64>;
pub type SampleLog64 = sampler::SampleLog<f64>;
pub type ClusterResult64 = cluster::ClusterResult<f64>;

/// `f32` concrete types.
pub type Trajectory32 = model::Trajectory<f32>;
pub type NoiseStep32 = model::NoiseStep<f32>;
pub type PolicyParams32 = model::PolicyParams<f32>;
pub type ThetaPrior32 = target::ThetaPrior<f32>;
pub type SamplerConfig32 = sampler::SamplerConfig<f32>;
pub type StateSpaceConfig32 = statespace::StateSpaceConfig<f32>;
pub type PegasusConfig32 = pegasus::PegasusConfig<f32>;
pub type SampleLog32 = sampler::SampleLog<f32>;
pub type ClusterResult32 = cluster::ClusterResult<f32>;
