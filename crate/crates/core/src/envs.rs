//! Native continuous-control environments.
//!
//! Two classic benchmarks implemented from their textbook dynamics so runs
//! are dependency-free and bit-reproducible: a cart-pole balanced by a
//! continuous force, and the continuous mountain car. States are plain
//! values; stepping never mutates in place.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    CartpoleContinuous,
    MountaincarContinuous,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::CartpoleContinuous => "cartpole_continuous",
            EnvKind::MountaincarContinuous => "mountaincar_continuous",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "cartpole_continuous" | "cartpole" => Some(EnvKind::CartpoleContinuous),
            "mountaincar_continuous" | "mountaincar" => Some(EnvKind::MountaincarContinuous),
            _ => None,
        }
    }

    pub fn observation_dim(self) -> usize {
        match self {
            EnvKind::CartpoleContinuous => 4,
            EnvKind::MountaincarContinuous => 2,
        }
    }

    pub fn action_dim(self) -> usize {
        1
    }
}

/// Cart-pole physics (the classic pole-on-cart equations, Euler-integrated).
#[derive(Debug, Clone, PartialEq)]
pub struct CartpoleConstants<T> {
    pub gravity: T,
    pub masscart: T,
    pub masspole: T,
    /// Half the pole length, as in the classic formulation.
    pub half_length: T,
    /// Force applied per unit action: force = force_scale * a.
    pub force_scale: T,
    pub dt: T,
    /// Episode ends when |theta| exceeds this (radians).
    pub theta_limit: T,
    /// Episode ends when |x| exceeds this.
    pub x_limit: T,
    /// Reset draws every component uniform in ±reset_range.
    pub reset_range: T,
}

impl<T: Scalar> Default for CartpoleConstants<T> {
    fn default() -> Self {
        Self {
            gravity: T::of(9.8),
            masscart: T::of(1.0),
            masspole: T::of(0.1),
            half_length: T::of(0.5),
            force_scale: T::of(10.0),
            dt: T::of(0.02),
            theta_limit: T::of(0.2),
            x_limit: T::of(2.4),
            reset_range: T::of(0.05),
        }
    }
}

/// Continuous mountain-car dynamics constants.
#[derive(Debug, Clone, PartialEq)]
pub struct MountaincarConstants<T> {
    /// Velocity gain per unit action.
    pub force_scale: T,
    /// Slope term coefficient: v -= slope_scale * cos(3p).
    pub slope_scale: T,
    pub velocity_limit: T,
    pub position_min: T,
    pub position_max: T,
    pub goal_position: T,
    /// Per-step penalty coefficient on a².
    pub action_cost: T,
    pub goal_reward: T,
    pub reset_low: T,
    pub reset_high: T,
}

impl<T: Scalar> Default for MountaincarConstants<T> {
    fn default() -> Self {
        Self {
            force_scale: T::of(0.0015),
            slope_scale: T::of(0.0025),
            velocity_limit: T::of(0.07),
            position_min: T::of(-1.2),
            position_max: T::of(0.6),
            goal_position: T::of(0.45),
            action_cost: T::of(0.1),
            goal_reward: T::of(100.0),
            reset_low: T::of(-0.6),
            reset_high: T::of(-0.4),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Physics<T> {
    Cartpole(CartpoleConstants<T>),
    Mountaincar(MountaincarConstants<T>),
}

/// An environment definition: which dynamics, with which constants, and the
/// episode step cap.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec<T> {
    pub max_episode_steps: usize,
    pub physics: Physics<T>,
}

impl<T: Scalar> EnvSpec<T> {
    pub fn cartpole() -> Self {
        Self {
            max_episode_steps: 1000,
            physics: Physics::Cartpole(CartpoleConstants::default()),
        }
    }

    pub fn mountaincar() -> Self {
        Self {
            max_episode_steps: 999,
            physics: Physics::Mountaincar(MountaincarConstants::default()),
        }
    }

    pub fn of_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::CartpoleContinuous => Self::cartpole(),
            EnvKind::MountaincarContinuous => Self::mountaincar(),
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self.physics {
            Physics::Cartpole(_) => EnvKind::CartpoleContinuous,
            Physics::Mountaincar(_) => EnvKind::MountaincarContinuous,
        }
    }

    pub fn observation_dim(&self) -> usize {
        self.kind().observation_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.kind().action_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_episode_steps == 0 {
            return Err(Error::Contract("max_episode_steps must be positive".into()));
        }
        let positive: Vec<(&str, f64)> = match &self.physics {
            Physics::Cartpole(c) => vec![
                ("gravity", c.gravity.to_f64_lossy()),
                ("masscart", c.masscart.to_f64_lossy()),
                ("masspole", c.masspole.to_f64_lossy()),
                ("half_length", c.half_length.to_f64_lossy()),
                ("force_scale", c.force_scale.to_f64_lossy()),
                ("dt", c.dt.to_f64_lossy()),
                ("theta_limit", c.theta_limit.to_f64_lossy()),
                ("x_limit", c.x_limit.to_f64_lossy()),
            ],
            Physics::Mountaincar(c) => vec![
                ("force_scale", c.force_scale.to_f64_lossy()),
                ("slope_scale", c.slope_scale.to_f64_lossy()),
                ("velocity_limit", c.velocity_limit.to_f64_lossy()),
                ("action_cost", c.action_cost.to_f64_lossy()),
            ],
        };
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Contract(format!(
                    "physics constant {name} must be finite and positive, got {v}"
                )));
            }
        }
        if let Physics::Mountaincar(c) = &self.physics {
            if c.position_min >= c.position_max {
                return Err(Error::Contract("position_min must be < position_max".into()));
            }
        }
        Ok(())
    }
}

/// A snapshot of one episode in flight.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState<T> {
    pub observation: Vec<T>,
    pub step_index: usize,
    pub terminated: bool,
}

/// Draw a fresh initial state.
pub fn reset<T: Scalar, R: Rng>(spec: &EnvSpec<T>, rng: &mut R) -> EnvState<T> {
    let observation = match &spec.physics {
        Physics::Cartpole(c) => {
            let range = c.reset_range.to_f64_lossy();
            (0..4)
                .map(|_| {
                    let u: f64 = rng.random();
                    T::of((2.0 * u - 1.0) * range)
                })
                .collect()
        }
        Physics::Mountaincar(c) => {
            let (lo, hi) = (c.reset_low.to_f64_lossy(), c.reset_high.to_f64_lossy());
            let u: f64 = rng.random();
            vec![T::of(lo + u * (hi - lo)), T::zero()]
        }
    };
    EnvState {
        observation,
        step_index: 0,
        terminated: false,
    }
}

/// Advance the dynamics one step. Actions are clipped to [-1, 1] before any
/// physics. Returns the successor state, the reward, and the done flag (also
/// recorded on the successor's `terminated`).
pub fn step<T: Scalar>(
    spec: &EnvSpec<T>,
    state: &EnvState<T>,
    action: &[T],
) -> Result<(EnvState<T>, T, bool)> {
    if state.terminated {
        return Err(Error::Contract("stepped a terminated environment state".into()));
    }
    if action.len() != spec.action_dim() {
        return Err(Error::Dimension(format!(
            "action has {} entries, environment expects {}",
            action.len(),
            spec.action_dim()
        )));
    }
    let one = T::one();
    let a = if action[0] > one {
        one
    } else if action[0] < -one {
        -one
    } else {
        action[0]
    };

    let step_index = state.step_index + 1;
    let (observation, reward, physics_done) = match &spec.physics {
        Physics::Cartpole(c) => {
            let [x, x_dot, theta, theta_dot] = [
                state.observation[0],
                state.observation[1],
                state.observation[2],
                state.observation[3],
            ];
            let force = c.force_scale * a;
            let total_mass = c.masscart + c.masspole;
            let polemass_length = c.masspole * c.half_length;
            let cos_t = theta.cos();
            let sin_t = theta.sin();
            let temp = (force + polemass_length * theta_dot * theta_dot * sin_t) / total_mass;
            let four_thirds = T::of(4.0 / 3.0);
            let theta_acc = (c.gravity * sin_t - cos_t * temp)
                / (c.half_length * (four_thirds - c.masspole * cos_t * cos_t / total_mass));
            let x_acc = temp - polemass_length * theta_acc * cos_t / total_mass;
            let x2 = x + c.dt * x_dot;
            let x_dot2 = x_dot + c.dt * x_acc;
            let theta2 = theta + c.dt * theta_dot;
            let theta_dot2 = theta_dot + c.dt * theta_acc;
            let fell = theta2.abs() > c.theta_limit || x2.abs() > c.x_limit;
            (vec![x2, x_dot2, theta2, theta_dot2], T::one(), fell)
        }
        Physics::Mountaincar(c) => {
            let p = state.observation[0];
            let v = state.observation[1];
            let three = T::of(3.0);
            let mut v2 = v + c.force_scale * a - c.slope_scale * (three * p).cos();
            v2 = v2.min(c.velocity_limit).max(-c.velocity_limit);
            let mut p2 = (p + v2).min(c.position_max).max(c.position_min);
            if p2 <= c.position_min && v2 < T::zero() {
                v2 = T::zero();
                p2 = c.position_min;
            }
            let reached = p2 >= c.goal_position;
            let mut reward = -c.action_cost * a * a;
            if reached {
                reward += c.goal_reward;
            }
            (vec![p2, v2], reward, reached)
        }
    };

    let done = physics_done || step_index >= spec.max_episode_steps;
    let next = EnvState {
        observation,
        step_index,
        terminated: done,
    };
    Ok((next, reward, done))
}
