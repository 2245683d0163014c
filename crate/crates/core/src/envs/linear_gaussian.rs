//! Linear-Gaussian control: `x' = A x + B u + noise`, linear policy
//! `u = K x + m`, Gaussian initial state, and a Gaussian-bump reward.

use std::ops::Range;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, MvNormal};
use crate::model::Environment;
use crate::scalar::Scalar;

/// One additive Gaussian reward bump over the joint state/action vector.
/// `inv_widths` are per-dimension reciprocal length scales; a zero entry
/// makes the bump flat along that dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianBump<F> {
    pub center: Vec<F>,
    pub inv_widths: Vec<F>,
    pub height: F,
}

/// Strictly positive reward: a floor plus Gaussian bumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpReward<F> {
    pub bumps: Vec<GaussianBump<F>>,
    pub floor: F,
}

impl<F: Scalar> BumpReward<F> {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.floor > F::zero()) {
            return Err(Error::config("reward floor must be positive".to_string()));
        }
        for bump in &self.bumps {
            if bump.center.len() != dim || bump.inv_widths.len() != dim {
                return Err(Error::dimension(format!(
                    "reward bump over {} dimensions, expected {}",
                    bump.center.len(),
                    dim
                )));
            }
            if !(bump.height > F::zero()) {
                return Err(Error::config("bump height must be positive".to_string()));
            }
        }
        Ok(())
    }

    /// Evaluates the reward at the concatenated `(x, u)` point.
    pub fn value(&self, x: &[F], u: &[F]) -> F {
        let half = F::cast(0.5);
        let mut total = self.floor;
        for bump in &self.bumps {
            let mut quad = F::zero();
            for d in 0..bump.center.len() {
                let z = if d < x.len() { x[d] } else { u[d - x.len()] };
                let q = (z - bump.center[d]) * bump.inv_widths[d];
                quad = quad + q * q;
            }
            total = total + bump.height * (-half * quad).exp();
        }
        total
    }
}

/// Model constants for the linear-Gaussian benchmark. The policy parameter
/// vector is the gain matrix in row-major order followed by the offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGaussianSpec<F> {
    pub state_matrix: Vec<Vec<F>>,
    pub control_matrix: Vec<Vec<F>>,
    pub noise_cov: Vec<Vec<F>>,
    pub init_mean: Vec<F>,
    pub init_cov: Vec<Vec<F>>,
    pub reward: BumpReward<F>,
    /// Optional policy block sizes (must sum to the parameter count);
    /// defaults to one block per scalar.
    #[serde(default)]
    pub policy_block_sizes: Option<Vec<usize>>,
}

pub struct LinearGaussianEnv<F> {
    state_matrix: Mat<F>,
    control_matrix: Mat<F>,
    initial: MvNormal<F>,
    transition_noise: MvNormal<F>,
    reward: BumpReward<F>,
    blocks: Vec<Range<usize>>,
}

pub fn make_linear_gaussian<F: Scalar>(
    spec: &LinearGaussianSpec<F>,
) -> Result<LinearGaussianEnv<F>> {
    let state_matrix = Mat::from_rows(&spec.state_matrix)?;
    let control_matrix = Mat::from_rows(&spec.control_matrix)?;
    let state_dim = state_matrix.rows();
    let action_dim = control_matrix.cols();
    if state_matrix.cols() != state_dim {
        return Err(Error::dimension("state matrix must be square".to_string()));
    }
    if control_matrix.rows() != state_dim {
        return Err(Error::dimension(format!(
            "control matrix has {} rows, expected {}",
            control_matrix.rows(),
            state_dim
        )));
    }
    let noise_cov = Mat::from_rows(&spec.noise_cov)?;
    let init_cov = Mat::from_rows(&spec.init_cov)?;
    let transition_noise = MvNormal::new(vec![F::zero(); state_dim], &noise_cov)?;
    let initial = MvNormal::new(spec.init_mean.clone(), &init_cov)?;
    if initial.dim() != state_dim {
        return Err(Error::dimension(
            "initial-state model dimension does not match state".to_string(),
        ));
    }
    spec.reward.validate(state_dim + action_dim)?;
    let theta_dim = action_dim * state_dim + action_dim;
    let blocks = match &spec.policy_block_sizes {
        None => (0..theta_dim).map(|i| i..i + 1).collect(),
        Some(sizes) => {
            let mut blocks = Vec::with_capacity(sizes.len());
            let mut start = 0;
            for &s in sizes {
                if s == 0 {
                    return Err(Error::config("policy block size 0".to_string()));
                }
                blocks.push(start..start + s);
                start += s;
            }
            if start != theta_dim {
                return Err(Error::config(format!(
                    "policy block sizes sum to {}, expected {}",
                    start, theta_dim
                )));
            }
            blocks
        }
    };
    Ok(LinearGaussianEnv {
        state_matrix,
        control_matrix,
        initial,
        transition_noise,
        reward: spec.reward.clone(),
        blocks,
    })
}

impl<F: Scalar> Environment<F> for LinearGaussianEnv<F> {
    fn state_dim(&self) -> usize {
        self.state_matrix.rows()
    }

    fn action_dim(&self) -> usize {
        self.control_matrix.cols()
    }

    fn theta_dim(&self) -> usize {
        self.action_dim() * self.state_dim() + self.action_dim()
    }

    fn policy_blocks(&self) -> Vec<Range<usize>> {
        self.blocks.clone()
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> Vec<F> {
        self.initial.sample(rng)
    }

    fn initial_log_density(&self, x0: &[F]) -> F {
        self.initial.log_density(x0)
    }

    fn transition_mean(&self, x: &[F], u: &[F], out: &mut [F]) {
        out.fill(F::zero());
        self.state_matrix.matvec_add(x, out);
        self.control_matrix.matvec_add(u, out);
    }

    fn sample_transition_noise(&self, rng: &mut dyn RngCore) -> Vec<F> {
        self.transition_noise.sample(rng)
    }

    fn transition_noise_log_density(&self, noise: &[F]) -> F {
        self.transition_noise.log_density(noise)
    }

    fn policy_mean(&self, theta: &[F], x: &[F], out: &mut [F]) {
        let s = self.state_dim();
        let a = self.action_dim();
        for row in 0..a {
            let mut acc = theta[a * s + row];
            for col in 0..s {
                acc = acc + theta[row * s + col] * x[col];
            }
            out[row] = acc;
        }
    }

    fn reward(&self, x: &[F], u: &[F]) -> F {
        self.reward.value(x, u)
    }

    fn reward_floor(&self) -> F {
        self.reward.floor
    }
}
