//! Observation adversary: bounded perturbations plus on/off scheduling.
//!
//! The adversary adds i.i.d. uniform noise to each observation component,
//! capped in l∞ norm. Whether a given step is attacked is governed by a
//! schedule: either a fixed on/off interval or a two-state Markov chain with
//! stay-nominal probability `m` and return-to-nominal probability `n`.
//! Rewards are never touched — there is no reward channel here at all.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Uniform perturbation bounds. `a == b` is a deterministic shift,
/// `a == -b` is zero-mean white noise, `a != b` with `a < b` is a bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec<T> {
    pub low: T,
    pub high: T,
    /// l∞ cap; both bounds must fit inside it.
    pub epsilon_attack: T,
}

impl<T: Scalar> AttackSpec<T> {
    pub fn new(low: T, high: T, epsilon_attack: T) -> Result<Self> {
        let spec = Self {
            low,
            high,
            epsilon_attack,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The identity perturbation.
    pub fn disabled() -> Self {
        Self {
            low: T::zero(),
            high: T::zero(),
            epsilon_attack: T::zero(),
        }
    }

    /// Zero-mean noise: U(-magnitude, magnitude).
    pub fn whitenoise(magnitude: T) -> Result<Self> {
        Self::new(-magnitude, magnitude, magnitude)
    }

    /// One-sided bias: U(low, high) with the cap set to the larger bound.
    pub fn bias(low: T, high: T) -> Result<Self> {
        Self::new(low, high, low.abs().max(high.abs()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && self.epsilon_attack.is_finite()) {
            return Err(Error::NonFinite("attack bound".into()));
        }
        if self.low > self.high {
            return Err(Error::Contract(format!(
                "attack bounds require low <= high, got {} > {}",
                self.low, self.high
            )));
        }
        if self.epsilon_attack < T::zero() {
            return Err(Error::Contract("epsilon_attack must be >= 0".into()));
        }
        if self.low.abs().max(self.high.abs()) > self.epsilon_attack {
            return Err(Error::Contract(format!(
                "attack bounds ({}, {}) exceed the l-infinity cap {}",
                self.low, self.high, self.epsilon_attack
            )));
        }
        Ok(())
    }
}

/// Add `u_i ~ U(low, high)` to every component. The draw happens in f64 so
/// the random stream does not depend on the scalar type.
pub fn perturb<T: Scalar, R: Rng>(state: &[T], spec: &AttackSpec<T>, rng: &mut R) -> Vec<T> {
    let lo = spec.low.to_f64_lossy();
    let hi = spec.high.to_f64_lossy();
    state
        .iter()
        .map(|s| {
            let u: f64 = rng.random();
            *s + T::of(lo + u * (hi - lo))
        })
        .collect()
}

/// When attacks switch on and off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleMode<T> {
    /// Never attack.
    Off,
    /// Deterministic alternation: `off_len` clean steps, then `on_len`
    /// attacked steps, repeating.
    FixedInterval { on_len: usize, off_len: usize },
    /// Two-state chain: stay nominal with probability `m`; once attacked,
    /// return to nominal with probability `n`.
    Markov { m: T, n: T },
}

/// Scheduler state threaded through a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState<T> {
    pub mode: ScheduleMode<T>,
    pub attack_on: bool,
    /// Steps spent in the current phase (fixed-interval mode only).
    pub counter: usize,
}

impl<T: Scalar> ScheduleState<T> {
    /// Start in the nominal (attack-off) phase.
    pub fn new(mode: ScheduleMode<T>) -> Result<Self> {
        if let ScheduleMode::Markov { m, n } = mode {
            let (mf, nf) = (m.to_f64_lossy(), n.to_f64_lossy());
            if !(0.0..=1.0).contains(&mf) || !(0.0..=1.0).contains(&nf) {
                return Err(Error::Contract(format!(
                    "markov schedule needs probabilities in [0,1], got m={mf}, n={nf}"
                )));
            }
        }
        if let ScheduleMode::FixedInterval { on_len, off_len } = mode {
            if on_len == 0 || off_len == 0 {
                return Err(Error::Contract(
                    "fixed-interval schedule needs on_len and off_len >= 1".into(),
                ));
            }
        }
        Ok(Self {
            mode,
            attack_on: false,
            counter: 0,
        })
    }

    /// Whether the chain satisfies the attacks-are-rarer-than-nominal
    /// assumption (n < m). Reported by callers, never enforced here.
    pub fn satisfies_rarity_assumption(&self) -> Option<bool> {
        match self.mode {
            ScheduleMode::Markov { m, n } => Some(n < m),
            _ => None,
        }
    }
}

/// Advance the schedule by one step, returning the new state.
pub fn advance_schedule<T: Scalar, R: Rng>(
    sched: &ScheduleState<T>,
    rng: &mut R,
) -> ScheduleState<T> {
    let mut next = *sched;
    match sched.mode {
        ScheduleMode::Off => {
            next.attack_on = false;
        }
        ScheduleMode::FixedInterval { on_len, off_len } => {
            next.counter += 1;
            let phase_len = if sched.attack_on { on_len } else { off_len };
            if next.counter >= phase_len {
                next.attack_on = !sched.attack_on;
                next.counter = 0;
            }
        }
        ScheduleMode::Markov { m, n } => {
            let u: f64 = rng.random();
            let stay_nominal = m.to_f64_lossy();
            let leave_attack = n.to_f64_lossy();
            next.attack_on = if sched.attack_on {
                u >= leave_attack
            } else {
                u >= stay_nominal
            };
        }
    }
    next
}
