//! Core model layer: trajectories, policies, the environment abstraction,
//! and the deterministic noise-to-state rollout everything else consumes.
//!
//! Trajectories are stored in noise coordinates: per step a transition-noise
//! vector (which at step 0 holds the initial state itself) plus an optional
//! policy-noise vector. States, actions, and rewards are the deterministic
//! image of the noise under the rollout and can always be recomputed
//! bit-identically.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sum, Scalar};

/// Per-step noise: the stochastic inputs from which a step is reconstructed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseStep<F> {
    /// Transition noise; at step 0 this is the initial state itself.
    pub state_noise: Vec<F>,
    /// Policy noise; empty at step 0 and everywhere for deterministic policies.
    pub action_noise: Vec<F>,
}

impl<F: Scalar> NoiseStep<F> {
    pub fn new(state_noise: Vec<F>, action_noise: Vec<F>) -> Self {
        NoiseStep {
            state_noise,
            action_noise,
        }
    }
}

/// A variable-length trajectory: noise inputs plus their derived states,
/// actions, and rewards. All sequences have length `last_step() + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<F> {
    pub noise: Vec<NoiseStep<F>>,
    pub states: Vec<Vec<F>>,
    pub actions: Vec<Vec<F>>,
    pub rewards: Vec<F>,
    /// Cached left-to-right sum of `rewards`.
    pub reward_sum: F,
}

impl<F: Scalar> Trajectory<F> {
    /// Number of steps, `k + 1`.
    pub fn len(&self) -> usize {
        self.noise.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noise.is_empty()
    }

    /// Final time index `k`.
    pub fn last_step(&self) -> usize {
        self.noise.len() - 1
    }

    pub fn last_reward(&self) -> F {
        *self.rewards.last().expect("nonempty trajectory")
    }

    /// Removes the final step, for death moves. Panics if only one step is
    /// left; such a proposal must never be made.
    pub fn truncate_last(&mut self) {
        assert!(
            self.len() > 1,
            "death move on a length-one trajectory is unreachable"
        );
        self.noise.pop();
        self.states.pop();
        self.actions.pop();
        self.rewards.pop();
        self.reward_sum = sum(&self.rewards);
    }
}

/// Flat policy-parameter vector plus the block structure used for blocked
/// proposal moves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams<F> {
    values: Vec<F>,
    blocks: Vec<Range<usize>>,
}

impl<F: Scalar> PolicyParams<F> {
    /// Blocks must be contiguous, disjoint, and cover all indices in order.
    pub fn new(values: Vec<F>, blocks: Vec<Range<usize>>) -> Result<Self> {
        let mut next = 0;
        for b in &blocks {
            if b.start != next || b.end <= b.start {
                return Err(Error::config(format!(
                    "policy blocks must partition 0..{} contiguously, got {:?}",
                    values.len(),
                    blocks
                )));
            }
            next = b.end;
        }
        if next != values.len() {
            return Err(Error::config(format!(
                "policy blocks cover 0..{} but there are {} parameters",
                next,
                values.len()
            )));
        }
        Ok(PolicyParams { values, blocks })
    }

    /// One block per scalar parameter.
    pub fn with_scalar_blocks(values: Vec<F>) -> Self {
        let blocks = (0..values.len()).map(|i| i..i + 1).collect();
        PolicyParams { values, blocks }
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Optional stochastic component of a policy.
pub trait PolicyNoise<F: Scalar>: Send + Sync {
    fn dim(&self) -> usize;
    fn sample(&self, theta: &[F], rng: &mut dyn RngCore) -> Vec<F>;
    fn log_density(&self, theta: &[F], noise: &[F]) -> F;
    /// Whether the noise density depends on theta; if true, policy moves must
    /// include the density ratio.
    fn theta_dependent(&self) -> bool {
        false
    }
}

/// A known MDP: initial-state model, deterministic transition and policy
/// means, noise models, and a strictly positive reward.
///
/// The additive form `x' = f(x, u) + noise` and `u = mean + noise` is the
/// default; environments with more general noise coupling override
/// [`Environment::transition`] / [`Environment::transition_log_density`].
pub trait Environment<F: Scalar>: Send + Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn theta_dim(&self) -> usize;
    /// Natural block structure of the policy parameters.
    fn policy_blocks(&self) -> Vec<Range<usize>>;

    fn sample_initial(&self, rng: &mut dyn RngCore) -> Vec<F>;
    fn initial_log_density(&self, x0: &[F]) -> F;

    /// Deterministic transition mean `f(x, u)`, written into `out`.
    fn transition_mean(&self, x: &[F], u: &[F], out: &mut [F]);
    fn sample_transition_noise(&self, rng: &mut dyn RngCore) -> Vec<F>;
    fn transition_noise_log_density(&self, noise: &[F]) -> F;

    /// General transition hook; defaults to `f(x, u) + noise`.
    fn transition(&self, x: &[F], u: &[F], noise: &[F], out: &mut [F]) {
        self.transition_mean(x, u, out);
        for (o, n) in out.iter_mut().zip(noise) {
            *o = *o + *n;
        }
    }

    /// `log p(x_next | x, u)`; defaults to the additive-residual density.
    fn transition_log_density(&self, x: &[F], u: &[F], x_next: &[F]) -> F {
        let mut mean = vec![F::zero(); self.state_dim()];
        self.transition_mean(x, u, &mut mean);
        let residual: Vec<F> = x_next
            .iter()
            .zip(&mean)
            .map(|(&a, &b)| a - b)
            .collect();
        self.transition_noise_log_density(&residual)
    }

    /// Deterministic policy mean, written into `out`.
    fn policy_mean(&self, theta: &[F], x: &[F], out: &mut [F]);

    fn policy_noise(&self) -> Option<&dyn PolicyNoise<F>> {
        None
    }

    /// General action hook; defaults to `policy_mean + noise`.
    fn action(&self, theta: &[F], x: &[F], noise: &[F], out: &mut [F]) {
        self.policy_mean(theta, x, out);
        for (o, n) in out.iter_mut().zip(noise) {
            *o = *o + *n;
        }
    }

    /// Strictly positive reward `r(x, u)`.
    fn reward(&self, x: &[F], u: &[F]) -> F;

    /// Lower bound applied to every reward so acceptance ratios never divide
    /// by zero.
    fn reward_floor(&self) -> F {
        F::cast(1e-12)
    }
}

/// Reward with the positivity floor applied.
pub fn floored_reward<F: Scalar>(env: &dyn Environment<F>, x: &[F], u: &[F]) -> F {
    env.reward(x, u).max(env.reward_floor())
}

fn check_noise_step<F: Scalar>(
    env: &dyn Environment<F>,
    step: &NoiseStep<F>,
    index: usize,
) -> Result<()> {
    if step.state_noise.len() != env.state_dim() {
        return Err(Error::dimension(format!(
            "state noise at step {} has length {}, expected {}",
            index,
            step.state_noise.len(),
            env.state_dim()
        )));
    }
    let expected_action = match (index, env.policy_noise()) {
        (0, _) | (_, None) => 0,
        (_, Some(_)) => env.action_dim(),
    };
    if step.action_noise.len() != expected_action {
        return Err(Error::dimension(format!(
            "action noise at step {} has length {}, expected {}",
            index,
            step.action_noise.len(),
            expected_action
        )));
    }
    Ok(())
}

fn check_theta<F: Scalar>(env: &dyn Environment<F>, theta: &PolicyParams<F>) -> Result<()> {
    if theta.len() != env.theta_dim() {
        return Err(Error::dimension(format!(
            "policy has {} parameters, environment expects {}",
            theta.len(),
            env.theta_dim()
        )));
    }
    Ok(())
}

/// Recomputes `states/actions/rewards[start..]` in place from the noise,
/// keeping everything before `start` untouched.
fn fill_derived<F: Scalar>(
    env: &dyn Environment<F>,
    theta: &PolicyParams<F>,
    traj: &mut Trajectory<F>,
    start: usize,
) -> Result<()> {
    let len = traj.noise.len();
    traj.states.truncate(start);
    traj.actions.truncate(start);
    traj.rewards.truncate(start);
    for n in start..len {
        let x = if n == 0 {
            traj.noise[0].state_noise.clone()
        } else {
            let mut x = vec![F::zero(); env.state_dim()];
            env.transition(
                &traj.states[n - 1],
                &traj.actions[n - 1],
                &traj.noise[n].state_noise,
                &mut x,
            );
            x
        };
        let mut u = vec![F::zero(); env.action_dim()];
        env.action(theta.values(), &x, &traj.noise[n].action_noise, &mut u);
        if x.iter().any(|v| !v.is_finite()) || u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "rollout",
                iteration: n,
                dump: format!("state {:?} action {:?}", x, u),
            });
        }
        let r = floored_reward(env, &x, &u);
        if !r.is_finite() {
            return Err(Error::NonFinite {
                context: "rollout reward",
                iteration: n,
                dump: format!("state {:?} action {:?} reward {}", x, u, r),
            });
        }
        traj.states.push(x);
        traj.actions.push(u);
        traj.rewards.push(r);
    }
    traj.reward_sum = sum(&traj.rewards);
    Ok(())
}

/// Deterministically derives a trajectory from its noise inputs:
/// `x_0 = noise[0]`, `u_n = policy(x_n) + phi_n`, `x_{n+1} = f(x_n, u_n) + psi_{n+1}`.
pub fn rollout_from_noise<F: Scalar>(
    env: &dyn Environment<F>,
    theta: &PolicyParams<F>,
    noise: Vec<NoiseStep<F>>,
) -> Result<Trajectory<F>> {
    if noise.is_empty() {
        return Err(Error::EmptyInput("noise sequence"));
    }
    check_theta(env, theta)?;
    for (i, step) in noise.iter().enumerate() {
        check_noise_step(env, step, i)?;
    }
    let mut traj = Trajectory {
        noise,
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        reward_sum: F::zero(),
    };
    fill_derived(env, theta, &mut traj, 0)?;
    Ok(traj)
}

/// Splices `new_noise` into the trajectory at `from_index` (which may equal
/// the current length, extending it) and recomputes everything downstream.
/// The prefix before `from_index` is preserved bit-identically; the result
/// equals a full rollout of the spliced noise sequence.
pub fn recompute_suffix<F: Scalar>(
    env: &dyn Environment<F>,
    theta: &PolicyParams<F>,
    traj: &Trajectory<F>,
    from_index: usize,
    new_noise: &[NoiseStep<F>],
) -> Result<Trajectory<F>> {
    if from_index > traj.len() {
        return Err(Error::IndexOutOfRange(format!(
            "suffix recompute at {} on a trajectory of length {}",
            from_index,
            traj.len()
        )));
    }
    check_theta(env, theta)?;
    for (offset, step) in new_noise.iter().enumerate() {
        check_noise_step(env, step, from_index + offset)?;
    }
    let mut out = traj.clone();
    for (offset, step) in new_noise.iter().enumerate() {
        let idx = from_index + offset;
        if idx < out.noise.len() {
            out.noise[idx] = step.clone();
        } else {
            out.noise.push(step.clone());
        }
    }
    if out.noise.is_empty() {
        return Err(Error::EmptyInput("noise sequence"));
    }
    fill_derived(env, theta, &mut out, from_index)?;
    Ok(out)
}

/// Draws the noise inputs for one step from the environment's models.
pub fn draw_noise_step<F: Scalar>(
    env: &dyn Environment<F>,
    theta: &PolicyParams<F>,
    step_index: usize,
    rng: &mut dyn RngCore,
) -> NoiseStep<F> {
    let state_noise = if step_index == 0 {
        env.sample_initial(rng)
    } else {
        env.sample_transition_noise(rng)
    };
    let action_noise = match (step_index, env.policy_noise()) {
        (0, _) | (_, None) => Vec::new(),
        (_, Some(pn)) => pn.sample(theta.values(), rng),
    };
    NoiseStep::new(state_noise, action_noise)
}

/// Draws a full noise sequence of final index `k`.
pub fn draw_noise_sequence<F: Scalar>(
    env: &dyn Environment<F>,
    theta: &PolicyParams<F>,
    k: usize,
    rng: &mut dyn RngCore,
) -> Vec<NoiseStep<F>> {
    (0..=k).map(|n| draw_noise_step(env, theta, n, rng)).collect()
}

/// Wrapper that counts transition-model invocations, for sample-budget
/// accounting. Counts calls to [`Environment::transition`] only (one per
/// simulated step); density evaluations are not simulation samples.
pub struct CountingEnv<'a, F: Scalar> {
    inner: &'a dyn Environment<F>,
    transitions: AtomicU64,
}

impl<'a, F: Scalar> CountingEnv<'a, F> {
    pub fn new(inner: &'a dyn Environment<F>) -> Self {
        CountingEnv {
            inner,
            transitions: AtomicU64::new(0),
        }
    }

    pub fn transitions(&self) -> u64 {
        self.transitions.load(Ordering::Relaxed)
    }
}

impl<'a, F: Scalar> Environment<F> for CountingEnv<'a, F> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }

    fn theta_dim(&self) -> usize {
        self.inner.theta_dim()
    }

    fn policy_blocks(&self) -> Vec<Range<usize>> {
        self.inner.policy_blocks()
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> Vec<F> {
        self.inner.sample_initial(rng)
    }

    fn initial_log_density(&self, x0: &[F]) -> F {
        self.inner.initial_log_density(x0)
    }

    fn transition_mean(&self, x: &[F], u: &[F], out: &mut [F]) {
        self.inner.transition_mean(x, u, out)
    }

    fn sample_transition_noise(&self, rng: &mut dyn RngCore) -> Vec<F> {
        self.inner.sample_transition_noise(rng)
    }

    fn transition_noise_log_density(&self, noise: &[F]) -> F {
        self.inner.transition_noise_log_density(noise)
    }

    fn transition(&self, x: &[F], u: &[F], noise: &[F], out: &mut [F]) {
        self.transitions.fetch_add(1, Ordering::Relaxed);
        self.inner.transition(x, u, noise, out)
    }

    fn transition_log_density(&self, x: &[F], u: &[F], x_next: &[F]) -> F {
        self.inner.transition_log_density(x, u, x_next)
    }

    fn policy_mean(&self, theta: &[F], x: &[F], out: &mut [F]) {
        self.inner.policy_mean(theta, x, out)
    }

    fn policy_noise(&self) -> Option<&dyn PolicyNoise<F>> {
        self.inner.policy_noise()
    }

    fn action(&self, theta: &[F], x: &[F], noise: &[F], out: &mut [F]) {
        self.inner.action(theta, x, noise, out)
    }

    fn reward(&self, x: &[F], u: &[F]) -> F {
        self.inner.reward(x, u)
    }

    fn reward_floor(&self) -> F {
        self.inner.reward_floor()
    }
}
