//! Shared environment constructors for unit tests.

use super::linear_gaussian::{BumpReward, GaussianBump, LinearGaussianSpec};

/// 1-D linear-Gaussian spec with scalar dynamics `x' = a x + b u + noise`,
/// standard-normal initial state, and a single unit bump reward over the
/// state.
pub fn scalar_lg_spec(a: f64, b: f64, noise_var: f64) -> LinearGaussianSpec<f64> {
    LinearGaussianSpec {
        state_matrix: vec![vec![a]],
        control_matrix: vec![vec![b]],
        noise_cov: vec![vec![noise_var]],
        init_mean: vec![0.0],
        init_cov: vec![vec![1.0]],
        reward: BumpReward {
            bumps: vec![GaussianBump {
                center: vec![0.0, 0.0],
                inv_widths: vec![1.0, 0.0],
                height: 1.0,
            }],
            floor: 1e-9,
        },
        policy_block_sizes: None,
    }
}
