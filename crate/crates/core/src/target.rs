//! Log-space evaluation of the target distributions the chains sample:
//! the trajectory-length prior, the noise-parameterized trajectory density,
//! and the annealed replicated joint over several trajectories.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Environment, PolicyParams, Trajectory};
use crate::scalar::Scalar;

/// Which reward statistic weights a trajectory in the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    /// Weight by the reward at the final step only.
    LastStepReward,
    /// Weight by the sum of rewards over all steps.
    SummedReward,
}

impl RewardVariant {
    /// Log of the trajectory's reward statistic under this variant.
    pub fn log_reward<F: Scalar>(self, traj: &Trajectory<F>) -> F {
        match self {
            RewardVariant::LastStepReward => traj.last_reward().ln(),
            RewardVariant::SummedReward => traj.reward_sum.ln(),
        }
    }
}

/// Whether a chain samples the exogenous noise or the states directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    NoiseSpace,
    StateSpace,
}

/// Target selector: reward statistic plus parameterization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetKind {
    pub variant: RewardVariant,
    pub parameterization: Parameterization,
}

impl TargetKind {
    pub fn summed() -> Self {
        TargetKind {
            variant: RewardVariant::SummedReward,
            parameterization: Parameterization::NoiseSpace,
        }
    }

    pub fn last_step() -> Self {
        TargetKind {
            variant: RewardVariant::LastStepReward,
            parameterization: Parameterization::NoiseSpace,
        }
    }
}

/// Annealing state: the real-valued replication level and the trajectory
/// count it implies.
///
/// At an integer level exactly that many trajectories exist, each with
/// exponent 1; the fractional extra trajectory exists only for non-integer
/// levels. This removes the double-count a literal reading of the fractional
/// form would produce at integer levels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealParams<F> {
    level: F,
    num_trajectories: usize,
}

impl<F: Scalar> AnnealParams<F> {
    pub fn from_level(level: F) -> Result<Self> {
        if !(level >= F::one()) || !level.is_finite() {
            return Err(Error::config(format!(
                "annealing level must be >= 1 and finite, got {}",
                level
            )));
        }
        let num = level.ceil().to_usize().ok_or_else(|| {
            Error::config(format!("annealing level {} too large", level))
        })?;
        Ok(AnnealParams {
            level,
            num_trajectories: num,
        })
    }

    pub fn level(&self) -> F {
        self.level
    }

    pub fn num_trajectories(&self) -> usize {
        self.num_trajectories
    }

    /// Per-trajectory annealing exponent: 1 for every trajectory except a
    /// fractional final one, whose exponent is the fractional part of the
    /// level. Trajectories are indexed from 1.
    pub fn exponent(&self, traj_index: usize) -> Result<F> {
        if traj_index == 0 || traj_index > self.num_trajectories {
            return Err(Error::IndexOutOfRange(format!(
                "trajectory index {} with {} live trajectories",
                traj_index, self.num_trajectories
            )));
        }
        let whole = self.level.floor();
        if F::from_count(traj_index) <= whole {
            Ok(F::one())
        } else {
            Ok(self.level - whole)
        }
    }

    /// All exponents, indexed from trajectory 1.
    pub fn exponents(&self) -> Vec<F> {
        (1..=self.num_trajectories)
            .map(|j| self.exponent(j).expect("index in range"))
            .collect()
    }
}

/// Uniform prior over an axis-aligned box. Log-density is 0 inside and
/// negative infinity outside, so prior terms cancel from acceptance ratios
/// inside the box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaPrior<F> {
    pub lower: Vec<F>,
    pub upper: Vec<F>,
}

impl<F: Scalar> ThetaPrior<F> {
    pub fn new(lower: Vec<F>, upper: Vec<F>) -> Result<Self> {
        let prior = ThetaPrior { lower, upper };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::dimension(
                "prior bounds have different lengths".to_string(),
            ));
        }
        for (lo, hi) in self.lower.iter().zip(&self.upper) {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::config(format!(
                    "prior bounds must be finite with lower < upper, got [{}, {}]",
                    lo, hi
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, theta: &[F]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (lo, hi))| t >= lo && t <= hi)
    }

    pub fn log_density(&self, theta: &[F]) -> F {
        if self.contains(theta) {
            F::zero()
        } else {
            F::neg_infinity()
        }
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> Vec<F> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| rng.random_range(lo..hi))
            .collect()
    }

    /// Euclidean diagonal of the box; the default clustering threshold is a
    /// fraction of this.
    pub fn diagonal(&self) -> F {
        self.lower
            .iter()
            .zip(&self.upper)
            .fold(F::zero(), |acc, (&lo, &hi)| acc + (hi - lo) * (hi - lo))
            .sqrt()
    }
}

fn check_discount<F: Scalar>(discount: F) -> Result<()> {
    if discount > F::zero() && discount < F::one() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "discount must lie in (0, 1), got {}",
            discount
        )))
    }
}

/// Log of the geometric trajectory-length prior `(1 - g) g^k`.
pub fn length_log_prior<F: Scalar>(k: usize, discount: F) -> Result<F> {
    check_discount(discount)?;
    Ok((F::one() - discount).ln() + F::from_count(k) * discount.ln())
}

/// Draws a length from the geometric prior.
pub fn sample_length<F: Scalar>(discount: F, rng: &mut dyn RngCore) -> Result<usize> {
    check_discount(discount)?;
    let u: F = F::unit_uniform(rng);
    // Inverse CDF of the geometric number of failures before a success with
    // probability 1 - discount.
    let k = ((F::one() - u).ln() / discount.ln()).floor();
    Ok(k.to_usize().unwrap_or(0))
}

/// Draws a complete trajectory from the model prior: length from the
/// geometric prior, noise from the environment's noise models, states by
/// rollout.
pub fn sample_trajectory_from_prior<F: Scalar>(
    env: &dyn Environment<F>,
    theta: &PolicyParams<F>,
    discount: F,
    rng: &mut dyn RngCore,
) -> Result<Trajectory<F>> {
    let k = sample_length(discount, rng)?;
    let noise = crate::model::draw_noise_sequence(env, theta, k, rng);
    crate::model::rollout_from_noise(env, theta, noise)
}

/// Log-density of a trajectory under the noise parameterization: length
/// prior plus per-step noise densities, the step-0 term being the
/// initial-state density. Independent of the reward model.
pub fn trajectory_log_density<F: Scalar>(
    env: &dyn Environment<F>,
    theta: &PolicyParams<F>,
    traj: &Trajectory<F>,
    discount: F,
) -> Result<F> {
    let mut acc = length_log_prior(traj.last_step(), discount)?;
    acc = acc + env.initial_log_density(&traj.noise[0].state_noise);
    for step in &traj.noise[1..] {
        acc = acc + env.transition_noise_log_density(&step.state_noise);
        if !step.action_noise.is_empty() {
            let pn = env.policy_noise().ok_or_else(|| {
                Error::config("action noise present but policy is deterministic".to_string())
            })?;
            acc = acc + pn.log_density(theta.values(), &step.action_noise);
        }
    }
    Ok(acc)
}

/// Log of the annealed replicated target over the live trajectories:
/// `log p(theta) + sum_j exponent_j * log R(traj_j) + sum_j log p(traj_j | theta)`.
///
/// At level 1 this is exactly the single-trajectory reward-weighted joint.
pub fn annealed_log_target<F: Scalar>(
    env: &dyn Environment<F>,
    theta: &PolicyParams<F>,
    trajectories: &[Trajectory<F>],
    anneal: &AnnealParams<F>,
    kind: TargetKind,
    discount: F,
    prior: &ThetaPrior<F>,
) -> Result<F> {
    if trajectories.len() != anneal.num_trajectories() {
        return Err(Error::dimension(format!(
            "{} trajectories but annealing level {} implies {}",
            trajectories.len(),
            anneal.level(),
            anneal.num_trajectories()
        )));
    }
    let mut acc = prior.log_density(theta.values());
    if acc == F::neg_infinity() {
        return Ok(acc);
    }
    for (j, traj) in trajectories.iter().enumerate() {
        let exponent = anneal.exponent(j + 1)?;
        acc = acc + exponent * kind.variant.log_reward(traj);
        acc = acc + trajectory_log_density(env, theta, traj, discount)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::linear_gaussian::make_linear_gaussian;
    use crate::envs::test_util::scalar_lg_spec;
    use crate::linalg::normal_log_density;
    use crate::model::{rollout_from_noise, NoiseStep};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn length_prior_trivial_values() {
        assert_relative_eq!(
            length_log_prior(0, 0.9).unwrap(),
            0.1f64.ln(),
            max_relative = 1e-15
        );
        assert_relative_eq!(
            length_log_prior(2, 0.5).unwrap(),
            0.125f64.ln(),
            max_relative = 1e-15
        );
    }

    #[test]
    fn length_prior_rejects_bad_discount() {
        assert!(length_log_prior::<f64>(0, 0.0).is_err());
        assert!(length_log_prior::<f64>(0, 1.0).is_err());
        assert!(length_log_prior::<f64>(0, -0.1).is_err());
    }

    #[test]
    fn length_prior_sums_to_one() {
        for discount in [0.5f64, 0.9, 0.99] {
            let mut total = 0.0;
            let mut k = 0;
            loop {
                let p = length_log_prior(k, discount).unwrap().exp();
                total += p;
                if p < 1e-12 {
                    break;
                }
                k += 1;
            }
            assert_relative_eq!(total, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn sampled_lengths_match_prior_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let discount = 0.7f64;
        let n = 200_000;
        let mean = (0..n)
            .map(|_| sample_length(discount, &mut rng).unwrap() as f64)
            .sum::<f64>()
            / n as f64;
        // Geometric mean is discount / (1 - discount).
        assert_relative_eq!(mean, discount / (1.0 - discount), epsilon = 0.03);
    }

    #[test]
    fn anneal_params_counts_trajectories() {
        let a = AnnealParams::from_level(1.0f64).unwrap();
        assert_eq!(a.num_trajectories(), 1);
        let b = AnnealParams::from_level(2.0f64).unwrap();
        assert_eq!(b.num_trajectories(), 2);
        let c = AnnealParams::from_level(2.5f64).unwrap();
        assert_eq!(c.num_trajectories(), 3);
        assert!(AnnealParams::from_level(0.5f64).is_err());
    }

    #[test]
    fn exponents_follow_fractional_level() {
        let a = AnnealParams::from_level(1.5f64).unwrap();
        assert_eq!(a.exponent(1).unwrap(), 1.0);
        assert_eq!(a.exponent(2).unwrap(), 0.5);
        assert!(a.exponent(0).is_err());
        assert!(a.exponent(3).is_err());
        let b = AnnealParams::from_level(3.0f64).unwrap();
        assert!(b.exponents().iter().all(|&e| e == 1.0));
    }

    #[test]
    fn exponents_sum_to_level() {
        for level in [1.0f64, 1.25, 2.0, 2.75, 7.0, 19.5] {
            let a = AnnealParams::from_level(level).unwrap();
            let total: f64 = a.exponents().iter().sum();
            assert_eq!(total, level);
        }
    }

    #[test]
    fn prior_box_behaviour() {
        let prior = ThetaPrior::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(prior.log_density(&[0.0, 0.0]), 0.0);
        assert_eq!(prior.log_density(&[2.0, 0.0]), f64::NEG_INFINITY);
        assert!(prior.contains(&[1.0, -1.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert!(prior.contains(&prior.sample(&mut rng)));
        }
        assert_relative_eq!(prior.diagonal(), 8.0f64.sqrt(), max_relative = 1e-15);
        assert!(ThetaPrior::new(vec![0.0], vec![0.0]).is_err());
    }

    fn lg_env() -> crate::envs::linear_gaussian::LinearGaussianEnv<f64> {
        make_linear_gaussian(&scalar_lg_spec(1.0, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn single_step_density_is_initial_term() {
        // k = 0 trajectory, standard-normal initial density, x0 = 0:
        // log p = log(1 - discount) + log N(0; 0, 1).
        let env = lg_env();
        let theta = PolicyParams::with_scalar_blocks(vec![0.0, 0.0]);
        let traj =
            rollout_from_noise(&env, &theta, vec![NoiseStep::new(vec![0.0], vec![])]).unwrap();
        let got = trajectory_log_density(&env, &theta, &traj, 0.9).unwrap();
        let expect = 0.1f64.ln() + normal_log_density(0.0, 0.0, 1.0);
        assert_relative_eq!(got, expect, max_relative = 1e-14);
    }

    #[test]
    fn density_ignores_reward_model() {
        // Two environments differing only in reward assign equal densities.
        let env_a = make_linear_gaussian(&scalar_lg_spec(1.0, 1.0, 0.25)).unwrap();
        let mut spec_b = scalar_lg_spec(1.0, 1.0, 0.25);
        spec_b.reward.bumps[0].height = 7.0;
        spec_b.reward.bumps[0].center = vec![2.0, -1.0];
        let env_b = make_linear_gaussian(&spec_b).unwrap();
        let theta = PolicyParams::with_scalar_blocks(vec![0.4, 0.2]);
        let noise = vec![
            NoiseStep::new(vec![0.3], vec![]),
            NoiseStep::new(vec![-0.2], vec![]),
            NoiseStep::new(vec![0.6], vec![]),
        ];
        let traj_a = rollout_from_noise(&env_a, &theta, noise.clone()).unwrap();
        let traj_b = rollout_from_noise(&env_b, &theta, noise).unwrap();
        let da = trajectory_log_density(&env_a, &theta, &traj_a, 0.8).unwrap();
        let db = trajectory_log_density(&env_b, &theta, &traj_b, 0.8).unwrap();
        assert_eq!(da, db);
    }

    #[test]
    fn three_step_density_matches_term_by_term_sum() {
        // Oracle: direct summation of scalar normal log-pdfs.
        let sigma2 = 0.25;
        let env = make_linear_gaussian(&scalar_lg_spec(1.0, 1.0, sigma2)).unwrap();
        let theta = PolicyParams::with_scalar_blocks(vec![0.4, 0.2]);
        let psis = [0.3, -0.2, 0.6, 0.05];
        let noise: Vec<NoiseStep<f64>> = psis
            .iter()
            .map(|&p| NoiseStep::new(vec![p], vec![]))
            .collect();
        let traj = rollout_from_noise(&env, &theta, noise).unwrap();
        let discount = 0.8;
        let got = trajectory_log_density(&env, &theta, &traj, discount).unwrap();
        let mut expect = (1.0 - discount).ln() + 3.0 * discount.ln();
        expect += normal_log_density(psis[0], 0.0, 1.0);
        for &p in &psis[1..] {
            expect += normal_log_density(p, 0.0, sigma2.sqrt());
        }
        assert_relative_eq!(got, expect, max_relative = 1e-12);
    }

    #[test]
    fn annealed_target_collapses_at_level_one() {
        let env = lg_env();
        let theta = PolicyParams::with_scalar_blocks(vec![0.1, 0.3]);
        let prior = ThetaPrior::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let traj = rollout_from_noise(
            &env,
            &theta,
            vec![
                NoiseStep::new(vec![0.2], vec![]),
                NoiseStep::new(vec![-0.4], vec![]),
            ],
        )
        .unwrap();
        let anneal = AnnealParams::from_level(1.0).unwrap();
        let discount = 0.9;
        let got = annealed_log_target(
            &env,
            &theta,
            std::slice::from_ref(&traj),
            &anneal,
            TargetKind::summed(),
            discount,
            &prior,
        )
        .unwrap();
        let expect = traj.reward_sum.ln()
            + trajectory_log_density(&env, &theta, &traj, discount).unwrap();
        assert_relative_eq!(got, expect, max_relative = 1e-14);
    }

    #[test]
    fn integer_level_has_no_fractional_term() {
        // A level-2 target equals the level-"2 plus zero-weight extra" value:
        // exponent 0 contributes nothing to the reward factor.
        let env = lg_env();
        let theta = PolicyParams::with_scalar_blocks(vec![0.1, 0.3]);
        let prior = ThetaPrior::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let mk = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = crate::model::draw_noise_sequence(&env, &theta, 2, &mut rng);
            rollout_from_noise(&env, &theta, noise).unwrap()
        };
        let trajs = [mk(1), mk(2)];
        let anneal = AnnealParams::from_level(2.0).unwrap();
        let discount = 0.9;
        let got = annealed_log_target(
            &env,
            &theta,
            &trajs,
            &anneal,
            TargetKind::summed(),
            discount,
            &prior,
        )
        .unwrap();
        let mut expect = 0.0;
        for traj in &trajs {
            expect += traj.reward_sum.ln()
                + trajectory_log_density(&env, &theta, traj, discount).unwrap();
        }
        assert_relative_eq!(got, expect, epsilon = 1e-12);
    }

    #[test]
    fn fractional_level_target_matches_hand_sum() {
        // Oracle: direct scalar evaluation of the replicated-target formula
        // at level 1.5 with two trajectories.
        let env = lg_env();
        let theta = PolicyParams::with_scalar_blocks(vec![0.1, 0.3]);
        let prior = ThetaPrior::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let mk = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = crate::model::draw_noise_sequence(&env, &theta, 3, &mut rng);
            rollout_from_noise(&env, &theta, noise).unwrap()
        };
        let trajs = [mk(5), mk(6)];
        let anneal = AnnealParams::from_level(1.5).unwrap();
        let discount = 0.85;
        let got = annealed_log_target(
            &env,
            &theta,
            &trajs,
            &anneal,
            TargetKind::summed(),
            discount,
            &prior,
        )
        .unwrap();
        let expect = 1.0 * trajs[0].reward_sum.ln()
            + 0.5 * trajs[1].reward_sum.ln()
            + trajectory_log_density(&env, &theta, &trajs[0], discount).unwrap()
            + trajectory_log_density(&env, &theta, &trajs[1], discount).unwrap();
        assert_relative_eq!(got, expect, epsilon = 1e-12);
    }

    #[test]
    fn target_rejects_trajectory_count_mismatch() {
        let env = lg_env();
        let theta = PolicyParams::with_scalar_blocks(vec![0.1, 0.3]);
        let prior = ThetaPrior::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let traj = rollout_from_noise(
            &env,
            &theta,
            vec![NoiseStep::new(vec![0.0], vec![])],
        )
        .unwrap();
        let anneal = AnnealParams::from_level(2.0).unwrap();
        let res = annealed_log_target(
            &env,
            &theta,
            std::slice::from_ref(&traj),
            &anneal,
            TargetKind::summed(),
            0.9,
            &prior,
        );
        assert!(matches!(res, Err(Error::Dimension(_))));
    }

    #[test]
    fn target_is_neg_infinite_outside_prior() {
        let env = lg_env();
        let theta = PolicyParams::with_scalar_blocks(vec![5.0, 0.0]);
        let prior = ThetaPrior::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let traj = rollout_from_noise(
            &env,
            &theta,
            vec![NoiseStep::new(vec![0.0], vec![])],
        )
        .unwrap();
        let anneal = AnnealParams::from_level(1.0).unwrap();
        let got = annealed_log_target(
            &env,
            &theta,
            std::slice::from_ref(&traj),
            &anneal,
            TargetKind::summed(),
            0.9,
            &prior,
        )
        .unwrap();
        assert_eq!(got, f64::NEG_INFINITY);
    }
}
