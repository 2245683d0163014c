//! Monte Carlo policy evaluation: expected discounted reward and the
//! common-random-numbers variance experiment.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::model::{
    draw_noise_sequence, rollout_from_noise, Environment, PolicyParams, Trajectory,
};
use crate::scalar::Scalar;

/// Smallest horizon H with `discount^(H+1) < 1e-3`, so the truncated tail
/// carries less than 0.1% of the weight.
pub fn default_eval_horizon<F: Scalar>(discount: F) -> usize {
    let target = F::cast(1e-3).ln() / discount.ln();
    let h = target.ceil().to_usize().unwrap_or(1);
    h.max(1)
}

/// Discounted reward sum of a fixed-length trajectory.
pub fn discounted_return<F: Scalar>(traj: &Trajectory<F>, discount: F) -> F {
    let mut weight = F::one();
    let mut acc = F::zero();
    for &r in &traj.rewards {
        acc = acc + weight * r;
        weight = weight * discount;
    }
    acc
}

/// One fresh-noise rollout of `horizon + 1` steps, returning its discounted
/// return.
pub fn sample_return<F: Scalar>(
    env: &dyn Environment<F>,
    theta: &PolicyParams<F>,
    horizon: usize,
    discount: F,
    rng: &mut dyn RngCore,
) -> Result<F> {
    let noise = draw_noise_sequence(env, theta, horizon, rng);
    let traj = rollout_from_noise(env, theta, noise)?;
    Ok(discounted_return(&traj, discount))
}

/// Monte Carlo estimate of the expected discounted reward: `(mean,
/// standard error)` over independent fresh-noise rollouts.
pub fn estimate_expected_reward<F: Scalar>(
    env: &dyn Environment<F>,
    theta: &PolicyParams<F>,
    num_rollouts: usize,
    horizon: usize,
    discount: F,
    rng: &mut dyn RngCore,
) -> Result<(F, F)> {
    if num_rollouts == 0 {
        return Err(Error::config("need at least one rollout".to_string()));
    }
    let mut mean = F::zero();
    let mut m2 = F::zero();
    for i in 0..num_rollouts {
        let value = sample_return(env, theta, horizon, discount, rng)?;
        let count = F::from_count(i + 1);
        let delta = value - mean;
        mean = mean + delta / count;
        m2 = m2 + delta * (value - mean);
    }
    let std_err = if num_rollouts > 1 {
        let variance = m2 / F::from_count(num_rollouts - 1);
        (variance / F::from_count(num_rollouts)).sqrt()
    } else {
        F::zero()
    };
    Ok((mean, std_err))
}

fn sample_variance<F: Scalar>(values: &[F]) -> F {
    let n = F::from_count(values.len());
    let mean = values.iter().fold(F::zero(), |a, &v| a + v) / n;
    let ss = values
        .iter()
        .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean));
    ss / (n - F::one())
}

/// Estimates the variance of the paired difference `J(theta + delta) -
/// J(theta)` two ways: with both returns computed on the same noise
/// sequence, and with independent draws. Returns `(var_common,
/// var_independent)`.
pub fn crn_variance_experiment<F: Scalar>(
    env: &dyn Environment<F>,
    theta: &PolicyParams<F>,
    delta: &[F],
    num_pairs: usize,
    horizon: usize,
    discount: F,
    rng: &mut dyn RngCore,
) -> Result<(F, F)> {
    if num_pairs < 2 {
        return Err(Error::config("need at least two pairs".to_string()));
    }
    if delta.len() != theta.len() {
        return Err(Error::dimension(format!(
            "perturbation has length {}, policy has {}",
            delta.len(),
            theta.len()
        )));
    }
    let shifted_values: Vec<F> = theta
        .values()
        .iter()
        .zip(delta)
        .map(|(&t, &d)| t + d)
        .collect();
    let shifted = PolicyParams::new(shifted_values, theta.blocks().to_vec())?;

    let mut common = Vec::with_capacity(num_pairs);
    let mut independent = Vec::with_capacity(num_pairs);
    for _ in 0..num_pairs {
        let noise = draw_noise_sequence(env, theta, horizon, rng);
        let base = discounted_return(&rollout_from_noise(env, theta, noise.clone())?, discount);
        let moved = discounted_return(&rollout_from_noise(env, &shifted, noise)?, discount);
        common.push(moved - base);

        let base = sample_return(env, theta, horizon, discount, rng)?;
        let moved = sample_return(env, &shifted, horizon, discount, rng)?;
        independent.push(moved - base);
    }
    Ok((sample_variance(&common), sample_variance(&independent)))
}
