//! Repeller particle system: particles fall under gravity with friction
//! through a field of repelling forces; the policy places the repellers and
//! sets their strengths.
//!
//! State is `[px, py, vx, vy]`; the action is the 2-D repeller force. The
//! velocity update carries Gaussian noise, and the position then advances
//! with the noisy velocity, so the transition uses the general (non-additive)
//! hook. Transition-noise vectors are stored state-sized with zero position
//! components.

use std::ops::Range;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{normal_log_density, Cholesky, Mat};
use crate::model::Environment;
use crate::scalar::Scalar;

/// Axis-aligned rectangle, for the uniform start region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect<F> {
    pub lower: Vec<F>,
    pub upper: Vec<F>,
}

impl<F: Scalar> Rect<F> {
    fn validate(&self) -> Result<()> {
        if self.lower.len() != 2 || self.upper.len() != 2 {
            return Err(Error::dimension("start region must be 2-D".to_string()));
        }
        for (lo, hi) in self.lower.iter().zip(&self.upper) {
            if !(lo < hi) {
                return Err(Error::config(
                    "start region must have lower < upper".to_string(),
                ));
            }
        }
        Ok(())
    }

    fn contains(&self, p: &[F]) -> bool {
        p[0] >= self.lower[0]
            && p[0] <= self.upper[0]
            && p[1] >= self.lower[1]
            && p[1] <= self.upper[1]
    }

    fn log_area(&self) -> F {
        ((self.upper[0] - self.lower[0]) * (self.upper[1] - self.lower[1])).ln()
    }
}

/// Constant-reward disc.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardZone<F> {
    pub center: Vec<F>,
    pub radius: F,
    pub level: F,
}

/// Position-space reward models for the repeller scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RepellerReward<F> {
    /// Constant level inside each disc, small positive background outside.
    CircularZones {
        zones: Vec<RewardZone<F>>,
        background: F,
    },
    /// Single Gaussian bump plus floor.
    GaussianBump {
        center: Vec<F>,
        cov: Vec<Vec<F>>,
        height: F,
        floor: F,
    },
}

fn default_clamp<F: Scalar>() -> F {
    F::cast(1e-3)
}

/// Scene and physics constants. The policy vector stores the repeller
/// positions first (2 entries each) and then the strengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "F: Scalar")]
pub struct RepellerSpec<F> {
    pub num_repellers: usize,
    pub start_region: Rect<F>,
    pub init_velocity: Vec<F>,
    pub gravity: Vec<F>,
    pub friction: F,
    pub dt: F,
    pub vel_noise_sigma: F,
    pub reward: RepellerReward<F>,
    /// Distances below this are clamped when evaluating the force field.
    #[serde(default = "default_clamp")]
    pub singularity_clamp: F,
}

/// Force exerted on a particle at `p` by the repellers encoded in `theta`:
/// the sum of `w_i * (p - r_i) / max(|p - r_i|, clamp)^3` terms. Independent
/// of velocity.
pub fn repeller_force<F: Scalar>(theta: &[F], p: &[F], clamp: F, out: &mut [F]) {
    debug_assert_eq!(theta.len() % 3, 0);
    let k = theta.len() / 3;
    out[0] = F::zero();
    out[1] = F::zero();
    for i in 0..k {
        let dx = p[0] - theta[2 * i];
        let dy = p[1] - theta[2 * i + 1];
        let dist = (dx * dx + dy * dy).sqrt();
        let clamped = dist.max(clamp);
        let scale = theta[2 * k + i] / (clamped * clamped * clamped);
        out[0] = out[0] + dx * scale;
        out[1] = out[1] + dy * scale;
    }
}

fn integrate<F: Scalar>(
    dt: F,
    gravity: &[F],
    friction: F,
    state: &[F],
    force: &[F],
    vel_noise: &[F],
    out: &mut [F],
) {
    // Velocity first, then position with the updated (noisy) velocity.
    for d in 0..2 {
        let v = state[2 + d];
        let v_det = v + dt * (force[d] + gravity[d] - friction * v);
        out[2 + d] = v_det + vel_noise[d];
        out[d] = state[d] + dt * out[2 + d];
    }
}

/// One physics step: `v' = v + dt*(force + gravity - friction*v) + noise`,
/// `p' = p + dt*v'`, with the force evaluated at the current position.
pub fn repeller_step<F: Scalar>(
    spec: &RepellerSpec<F>,
    theta: &[F],
    state: &[F],
    vel_noise: &[F],
) -> Vec<F> {
    let mut force = [F::zero(); 2];
    repeller_force(theta, &state[..2], spec.singularity_clamp, &mut force);
    let mut out = vec![F::zero(); 4];
    integrate(
        spec.dt,
        &spec.gravity,
        spec.friction,
        state,
        &force,
        vel_noise,
        &mut out,
    );
    out
}

enum CompiledReward<F> {
    Zones {
        zones: Vec<RewardZone<F>>,
        background: F,
    },
    Bump {
        center: Vec<F>,
        chol: Cholesky<F>,
        height: F,
        floor: F,
    },
}

pub struct RepellersEnv<F> {
    spec: RepellerSpec<F>,
    reward: CompiledReward<F>,
}

pub fn make_repellers<F: Scalar>(spec: &RepellerSpec<F>) -> Result<RepellersEnv<F>> {
    if spec.num_repellers == 0 {
        return Err(Error::config("need at least one repeller".to_string()));
    }
    spec.start_region.validate()?;
    if spec.init_velocity.len() != 2 || spec.gravity.len() != 2 {
        return Err(Error::dimension(
            "init velocity and gravity must be 2-D".to_string(),
        ));
    }
    if !(spec.dt > F::zero()) {
        return Err(Error::config("dt must be positive".to_string()));
    }
    if !(spec.vel_noise_sigma > F::zero()) {
        return Err(Error::config(
            "velocity noise sigma must be positive".to_string(),
        ));
    }
    if !(spec.singularity_clamp > F::zero()) {
        return Err(Error::config(
            "singularity clamp must be positive".to_string(),
        ));
    }
    let reward = match &spec.reward {
        RepellerReward::CircularZones { zones, background } => {
            if !(*background > F::zero()) {
                return Err(Error::config("zone background must be positive".to_string()));
            }
            for z in zones {
                if z.center.len() != 2 || !(z.radius > F::zero()) || !(z.level > F::zero()) {
                    return Err(Error::config(
                        "reward zones need 2-D centers, positive radius and level".to_string(),
                    ));
                }
            }
            CompiledReward::Zones {
                zones: zones.clone(),
                background: *background,
            }
        }
        RepellerReward::GaussianBump {
            center,
            cov,
            height,
            floor,
        } => {
            if center.len() != 2 {
                return Err(Error::dimension("bump center must be 2-D".to_string()));
            }
            if !(*height > F::zero()) || !(*floor > F::zero()) {
                return Err(Error::config(
                    "bump height and floor must be positive".to_string(),
                ));
            }
            let cov = Mat::from_rows(cov)?;
            if cov.rows() != 2 {
                return Err(Error::dimension("bump covariance must be 2x2".to_string()));
            }
            CompiledReward::Bump {
                center: center.clone(),
                chol: Cholesky::new(&cov)?,
                height: *height,
                floor: *floor,
            }
        }
    };
    Ok(RepellersEnv {
        spec: spec.clone(),
        reward,
    })
}

impl<F: Scalar> RepellersEnv<F> {
    pub fn spec(&self) -> &RepellerSpec<F> {
        &self.spec
    }
}

impl<F: Scalar> Environment<F> for RepellersEnv<F> {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn theta_dim(&self) -> usize {
        3 * self.spec.num_repellers
    }

    fn policy_blocks(&self) -> Vec<Range<usize>> {
        // One block per repeller position, one per strength.
        let k = self.spec.num_repellers;
        let mut blocks: Vec<Range<usize>> = (0..k).map(|i| 2 * i..2 * i + 2).collect();
        blocks.extend((0..k).map(|i| 2 * k + i..2 * k + i + 1));
        blocks
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> Vec<F> {
        let region = &self.spec.start_region;
        let px = rng.random_range(region.lower[0]..region.upper[0]);
        let py = rng.random_range(region.lower[1]..region.upper[1]);
        vec![px, py, self.spec.init_velocity[0], self.spec.init_velocity[1]]
    }

    fn initial_log_density(&self, x0: &[F]) -> F {
        let in_region = self.spec.start_region.contains(&x0[..2]);
        let velocity_matches =
            x0[2] == self.spec.init_velocity[0] && x0[3] == self.spec.init_velocity[1];
        if in_region && velocity_matches {
            -self.spec.start_region.log_area()
        } else {
            F::neg_infinity()
        }
    }

    fn transition_mean(&self, x: &[F], u: &[F], out: &mut [F]) {
        let zero = [F::zero(), F::zero()];
        integrate(
            self.spec.dt,
            &self.spec.gravity,
            self.spec.friction,
            x,
            u,
            &zero,
            out,
        );
    }

    fn sample_transition_noise(&self, rng: &mut dyn RngCore) -> Vec<F> {
        let sigma = self.spec.vel_noise_sigma;
        vec![
            F::zero(),
            F::zero(),
            sigma * F::std_normal(rng),
            sigma * F::std_normal(rng),
        ]
    }

    fn transition_noise_log_density(&self, noise: &[F]) -> F {
        if noise[0] != F::zero() || noise[1] != F::zero() {
            return F::neg_infinity();
        }
        let sigma = self.spec.vel_noise_sigma;
        normal_log_density(noise[2], F::zero(), sigma)
            + normal_log_density(noise[3], F::zero(), sigma)
    }

    fn transition(&self, x: &[F], u: &[F], noise: &[F], out: &mut [F]) {
        integrate(
            self.spec.dt,
            &self.spec.gravity,
            self.spec.friction,
            x,
            u,
            &noise[2..],
            out,
        );
    }

    fn transition_log_density(&self, x: &[F], u: &[F], x_next: &[F]) -> F {
        // The position advances deterministically with the noisy velocity;
        // anything off that line has zero density.
        let dt = self.spec.dt;
        for d in 0..2 {
            if x_next[d] != x[d] + dt * x_next[2 + d] {
                return F::neg_infinity();
            }
        }
        let sigma = self.spec.vel_noise_sigma;
        let mut acc = F::zero();
        for d in 0..2 {
            let v = x[2 + d];
            let v_det = v + dt * (u[d] + self.spec.gravity[d] - self.spec.friction * v);
            acc = acc + normal_log_density(x_next[2 + d], v_det, sigma);
        }
        acc
    }

    fn policy_mean(&self, theta: &[F], x: &[F], out: &mut [F]) {
        repeller_force(theta, &x[..2], self.spec.singularity_clamp, out);
    }

    fn reward(&self, x: &[F], _u: &[F]) -> F {
        let p = &x[..2];
        match &self.reward {
            CompiledReward::Zones { zones, background } => {
                let mut best = *background;
                for z in zones {
                    let dx = p[0] - z.center[0];
                    let dy = p[1] - z.center[1];
                    if (dx * dx + dy * dy).sqrt() <= z.radius && z.level > best {
                        best = z.level;
                    }
                }
                best
            }
            CompiledReward::Bump {
                center,
                chol,
                height,
                floor,
            } => {
                let diff = [p[0] - center[0], p[1] - center[1]];
                let y = chol.forward_solve(&diff);
                let quad = y[0] * y[0] + y[1] * y[1];
                *floor + *height * (-F::cast(0.5) * quad).exp()
            }
        }
    }
}
