//! The benchmark environments: linear-Gaussian control and the repeller
//! particle system.

pub mod linear_gaussian;
pub mod repellers;

#[cfg(test)]
pub(crate) mod test_util;

pub use linear_gaussian::{
    make_linear_gaussian, BumpReward, GaussianBump, LinearGaussianEnv, LinearGaussianSpec,
};
pub use repellers::{
    make_repellers, repeller_force, repeller_step, Rect, RepellerReward, RepellerSpec,
    RepellersEnv, RewardZone,
};
