//! Policy search with frozen scenarios and numerical gradients: rollouts
//! reuse a fixed set of pre-drawn noise sequences, which makes the objective
//! deterministic in the policy and lets plain gradient ascent climb it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::discounted_return;
use crate::model::{
    draw_noise_sequence, rollout_from_noise, CountingEnv, Environment, NoiseStep, PolicyParams,
};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PegasusConfig<F> {
    /// Number of frozen noise sequences.
    pub num_scenarios: usize,
    /// Rollout truncation; scenarios have `horizon + 1` steps.
    pub horizon: usize,
    /// Central-difference step.
    pub fd_step: F,
    pub learn_rate: F,
    pub num_iters: usize,
    pub seed: u64,
    /// Discount used by the objective.
    pub discount: F,
}

impl<F: Scalar> PegasusConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if self.num_scenarios == 0 || self.horizon == 0 {
            return Err(Error::config(
                "need at least one scenario and a positive horizon".to_string(),
            ));
        }
        if !(self.fd_step > F::zero()) || !(self.learn_rate > F::zero()) {
            return Err(Error::config(
                "finite-difference step and learning rate must be positive".to_string(),
            ));
        }
        if !(self.discount > F::zero() && self.discount < F::one()) {
            return Err(Error::config(format!(
                "discount must lie in (0, 1), got {}",
                self.discount
            )));
        }
        Ok(())
    }
}

/// One recorded ascent iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct PegasusIterate<F> {
    pub iteration: usize,
    pub theta: Vec<F>,
    pub objective: F,
    /// Cumulative transition-model samples consumed up to this point.
    pub samples_consumed: u64,
}

/// Full ascent trace; the final iterate's parameters are the point estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct PegasusTrace<F> {
    pub iterates: Vec<PegasusIterate<F>>,
}

impl<F: Scalar> PegasusTrace<F> {
    pub fn final_theta(&self) -> &[F] {
        &self.iterates.last().expect("nonempty trace").theta
    }

    /// CSV dump: `iter,theta_0..theta_d,objective,samples_consumed`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let dim = self.iterates.first().map_or(0, |it| it.theta.len());
        write!(w, "iter")?;
        for d in 0..dim {
            write!(w, ",theta_{}", d)?;
        }
        writeln!(w, ",objective,samples_consumed")?;
        for it in &self.iterates {
            write!(w, "{}", it.iteration)?;
            for v in &it.theta {
                write!(w, ",{}", v)?;
            }
            writeln!(w, ",{},{}", it.objective, it.samples_consumed)?;
        }
        Ok(())
    }
}

/// Draws the frozen scenario set.
pub fn draw_scenarios<F: Scalar>(
    env: &dyn Environment<F>,
    theta: &PolicyParams<F>,
    num_scenarios: usize,
    horizon: usize,
    seed: u64,
) -> Vec<Vec<NoiseStep<F>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_scenarios)
        .map(|_| draw_noise_sequence(env, theta, horizon, &mut rng))
        .collect()
}

/// Mean discounted return over the frozen scenarios; deterministic in the
/// policy for a fixed scenario set.
pub fn pegasus_objective<F: Scalar>(
    env: &dyn Environment<F>,
    theta: &PolicyParams<F>,
    scenarios: &[Vec<NoiseStep<F>>],
    discount: F,
) -> Result<F> {
    if scenarios.is_empty() {
        return Err(Error::EmptyInput("scenarios"));
    }
    let mut acc = F::zero();
    for noise in scenarios {
        let traj = rollout_from_noise(env, theta, noise.clone())?;
        acc = acc + discounted_return(&traj, discount);
    }
    Ok(acc / F::from_count(scenarios.len()))
}

fn gradient<F: Scalar>(
    env: &dyn Environment<F>,
    theta: &PolicyParams<F>,
    scenarios: &[Vec<NoiseStep<F>>],
    discount: F,
    fd_step: F,
) -> Result<Vec<F>> {
    let mut grad = vec![F::zero(); theta.len()];
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let original = theta.values()[i];
        probe.values_mut()[i] = original + fd_step;
        let plus = pegasus_objective(env, &probe, scenarios, discount)?;
        probe.values_mut()[i] = original - fd_step;
        let minus = pegasus_objective(env, &probe, scenarios, discount)?;
        probe.values_mut()[i] = original;
        grad[i] = (plus - minus) / (fd_step + fd_step);
    }
    Ok(grad)
}

/// Gradient ascent with central finite differences on the frozen-scenario
/// objective. A non-finite gradient halves the step once and then aborts.
pub fn pegasus_search<F: Scalar>(
    env: &dyn Environment<F>,
    config: &PegasusConfig<F>,
    initial_theta: &PolicyParams<F>,
) -> Result<PegasusTrace<F>> {
    config.validate()?;
    let counting = CountingEnv::new(env);
    let scenarios = draw_scenarios(
        &counting,
        initial_theta,
        config.num_scenarios,
        config.horizon,
        config.seed,
    );
    let mut theta = initial_theta.clone();
    let mut iterates = Vec::with_capacity(config.num_iters + 1);
    let objective = pegasus_objective(&counting, &theta, &scenarios, config.discount)?;
    iterates.push(PegasusIterate {
        iteration: 0,
        theta: theta.values().to_vec(),
        objective,
        samples_consumed: counting.transitions(),
    });
    for iter in 1..=config.num_iters {
        let mut grad = gradient(&counting, &theta, &scenarios, config.discount, config.fd_step)?;
        if grad.iter().any(|g| !g.is_finite()) {
            let halved = config.fd_step * F::cast(0.5);
            grad = gradient(&counting, &theta, &scenarios, config.discount, halved)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    context: "pegasus gradient",
                    iteration: iter,
                    dump: format!("theta {:?} gradient {:?}", theta.values(), grad),
                });
            }
        }
        for (value, g) in theta.values_mut().iter_mut().zip(&grad) {
            *value += config.learn_rate * *g;
        }
        let objective = pegasus_objective(&counting, &theta, &scenarios, config.discount)?;
        iterates.push(PegasusIterate {
            iteration: iter,
            theta: theta.values().to_vec(),
            objective,
            samples_consumed: counting.transitions(),
        });
    }
    Ok(PegasusTrace { iterates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::linear_gaussian::{make_linear_gaussian, BumpReward, GaussianBump};
    use crate::envs::test_util::scalar_lg_spec;
    use approx::assert_relative_eq;

    fn constant_env(c: f64) -> crate::envs::linear_gaussian::LinearGaussianEnv<f64> {
        let mut spec = scalar_lg_spec(1.0, 1.0, 0.25);
        spec.reward = BumpReward {
            bumps: vec![],
            floor: c,
        };
        make_linear_gaussian(&spec).unwrap()
    }

    #[test]
    fn constant_reward_objective_is_geometric_sum() {
        let c = 1.5;
        let env = constant_env(c);
        let theta = PolicyParams::with_scalar_blocks(vec![0.3, -0.2]);
        let horizon = 11;
        let discount = 0.9;
        let scenarios = draw_scenarios(&env, &theta, 7, horizon, 42);
        let value = pegasus_objective(&env, &theta, &scenarios, discount).unwrap();
        let expect = c * (1.0 - discount.powi(horizon as i32 + 1)) / (1.0 - discount);
        assert_relative_eq!(value, expect, max_relative = 1e-12);
    }

    #[test]
    fn objective_replays_bit_identically() {
        let env = make_linear_gaussian(&scalar_lg_spec(1.0, 1.0, 0.25)).unwrap();
        let theta = PolicyParams::with_scalar_blocks(vec![0.3, -0.2]);
        let scenarios = draw_scenarios(&env, &theta, 5, 15, 7);
        let a = pegasus_objective(&env, &theta, &scenarios, 0.9).unwrap();
        let b = pegasus_objective(&env, &theta, &scenarios, 0.9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_zero_noise_scenario_matches_recursion_oracle() {
        // Oracle: scratch-script recursion over the same 1-D model (frozen).
        let mut spec = scalar_lg_spec(1.0, 1.0, 0.01);
        spec.reward = BumpReward {
            bumps: vec![GaussianBump {
                center: vec![1.0, 0.2],
                inv_widths: vec![1.0, 0.5],
                height: 2.0,
            }],
            floor: 1e-9,
        };
        let env = make_linear_gaussian(&spec).unwrap();
        let theta = PolicyParams::with_scalar_blocks(vec![-0.35, 0.6]);
        let psis = [0.8, 0.05, -0.12, 0.03, 0.0];
        let scenario: Vec<NoiseStep<f64>> = psis
            .iter()
            .map(|&p| NoiseStep::new(vec![p], vec![]))
            .collect();
        let value = pegasus_objective(&env, &theta, &[scenario], 0.9).unwrap();
        assert_relative_eq!(value, 7.7638997428273004, max_relative = 1e-12);
    }

    #[test]
    fn flat_objective_never_moves() {
        let env = constant_env(1.0);
        let config = PegasusConfig {
            num_scenarios: 4,
            horizon: 10,
            fd_step: 1e-3,
            learn_rate: 0.5,
            num_iters: 8,
            seed: 3,
            discount: 0.9,
        };
        let theta = PolicyParams::with_scalar_blocks(vec![0.4, -0.1]);
        let trace = pegasus_search(&env, &config, &theta).unwrap();
        for it in &trace.iterates {
            assert_eq!(it.theta, vec![0.4, -0.1]);
        }
        assert_eq!(trace.iterates.len(), 9);
    }

    #[test]
    fn concave_objective_converges_to_its_vertex() {
        // With A = 0, B = 1, a (numerically) zero initial state, and a
        // horizon of 1, the only reward that varies is the bump at
        // x_1 = m, so the objective is a concave unimodal function of the
        // offset with its vertex at the bump center, and the gain never
        // enters (x_0 = 0 kills its gradient).
        let mut spec = scalar_lg_spec(0.0, 1.0, 1e-18);
        spec.init_mean = vec![0.0];
        spec.init_cov = vec![vec![1e-18]];
        spec.reward = BumpReward {
            bumps: vec![GaussianBump {
                center: vec![0.7, 0.0],
                inv_widths: vec![1.0, 0.0],
                height: 1.0,
            }],
            floor: 1e-9,
        };
        let env = make_linear_gaussian(&spec).unwrap();
        let config = PegasusConfig {
            num_scenarios: 1,
            horizon: 1,
            fd_step: 1e-4,
            learn_rate: 0.25,
            num_iters: 400,
            seed: 1,
            discount: 0.9,
        };
        let theta = PolicyParams::with_scalar_blocks(vec![0.0, 0.2]);
        let trace = pegasus_search(&env, &config, &theta).unwrap();
        assert_relative_eq!(trace.final_theta()[1], 0.7, epsilon = 1e-3);
        assert_relative_eq!(trace.final_theta()[0], 0.0, epsilon = 1e-6);
        // Objective improves monotonically overall.
        let first = trace.iterates.first().unwrap().objective;
        let last = trace.iterates.last().unwrap().objective;
        assert!(last > first);
    }

    #[test]
    fn sample_accounting_is_exact() {
        let env = constant_env(1.0);
        let config = PegasusConfig {
            num_scenarios: 3,
            horizon: 10,
            fd_step: 1e-3,
            learn_rate: 0.1,
            num_iters: 2,
            seed: 9,
            discount: 0.9,
        };
        let theta = PolicyParams::with_scalar_blocks(vec![0.0, 0.0]);
        let trace = pegasus_search(&env, &config, &theta).unwrap();
        // Initial objective: scenarios * horizon transitions.
        let per_eval = 3 * 10;
        assert_eq!(trace.iterates[0].samples_consumed, per_eval as u64);
        // Each iteration: 2 * dim gradient evaluations plus the trace
        // objective.
        let per_iter = (2 * 2 + 1) * per_eval;
        assert_eq!(
            trace.iterates[2].samples_consumed,
            (per_eval + 2 * per_iter) as u64
        );
    }

    #[test]
    fn central_difference_matches_forward_difference() {
        let mut spec = scalar_lg_spec(0.5, 1.0, 1e-18);
        spec.reward = BumpReward {
            bumps: vec![GaussianBump {
                center: vec![0.4, 0.1],
                inv_widths: vec![1.0, 0.8],
                height: 2.0,
            }],
            floor: 1e-9,
        };
        let env = make_linear_gaussian(&spec).unwrap();
        let theta = PolicyParams::with_scalar_blocks(vec![0.1, 0.2]);
        let scenarios = draw_scenarios(&env, &theta, 2, 10, 5);
        let discount = 0.9;
        let h = 1e-4;
        let central = gradient(&env, &theta, &scenarios, discount, h).unwrap();
        let base = pegasus_objective(&env, &theta, &scenarios, discount).unwrap();
        for i in 0..2 {
            let mut probe = theta.clone();
            probe.values_mut()[i] += h;
            let plus = pegasus_objective(&env, &probe, &scenarios, discount).unwrap();
            let forward = (plus - base) / h;
            assert_relative_eq!(central[i], forward, epsilon = 1e-2 * (1.0 + forward.abs()));
        }
    }
}
