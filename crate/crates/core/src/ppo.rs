//! Proximal policy optimization with a clipped surrogate objective.
//!
//! One [`ppo_update`] consumes a batch of transitions with frozen
//! pre-update log-probs, normalizes advantages over the batch, then runs
//! several epochs of shuffled minibatch Adam steps on two separate networks:
//! the policy (clipped surrogate plus optional entropy bonus, maximized) and
//! the value function (mean squared error against empirical returns,
//! minimized). The same machinery trains Gaussian sub-policies and the
//! categorical master.

use rand::Rng;

use crate::approximator::{
    adam_step, forward, gaussian_log_prob, grad, log_softmax, BatchLoss, HeadKind, OptState,
    ParamSet, SampleLoss,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Hyperparameters for one PPO learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoConfig<T> {
    pub clip_eps: T,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub value_coef: T,
    /// Entropy bonus for sub-policies.
    pub entropy_coef: T,
    /// Entropy bonus used when updating the master (it has only two actions
    /// and needs the extra exploration pressure).
    pub entropy_coef_master: T,
    pub max_grad_norm: T,
    /// Environment steps collected per training iteration.
    pub steps_per_iteration: usize,
    pub gamma: T,
    /// Discount for the selector's own advantage estimates. The selector
    /// cannot observe the state features that determine long-horizon return,
    /// so a long discount buries its per-decision credit in noise it cannot
    /// explain; a shorter horizon concentrates credit on the steps that
    /// actually precede a termination.
    pub gamma_master: T,
    pub lambda: T,
    pub lr_policy: T,
    pub lr_value: T,
    /// Learning rate for the master selector. Its gradient signal is far
    /// noisier per sample than the sub-policies' (credit for a selection
    /// arrives dozens of steps later), so it usually wants a larger step.
    pub lr_master: T,
    /// Multiplier on the nominal sub-policy's learning rates during joint
    /// hierarchical training (pretraining always runs at full rate). A
    /// pretrained nominal policy is the anchor the selector's observation is
    /// measured against; scaling its fine-tuning step below 1 keeps early
    /// mis-assigned segments from eroding that anchor before the selector
    /// has locked onto the regime mapping.
    pub lr_nom_scale: T,
    pub normalize_advantages: bool,
}

impl<T: Scalar> Default for PpoConfig<T> {
    fn default() -> Self {
        Self {
            clip_eps: T::of(0.2),
            epochs: 10,
            minibatch_size: 64,
            value_coef: T::of(0.5),
            entropy_coef: T::zero(),
            entropy_coef_master: T::of(0.01),
            max_grad_norm: T::of(0.5),
            steps_per_iteration: 2048,
            gamma: T::of(0.99),
            gamma_master: T::of(0.99),
            lambda: T::of(0.95),
            lr_policy: T::of(3e-4),
            lr_value: T::of(1e-3),
            lr_master: T::of(3e-3),
            lr_nom_scale: T::one(),
            normalize_advantages: true,
        }
    }
}

impl<T: Scalar> PpoConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.clip_eps <= T::zero() {
            return Err(Error::Contract("clip_eps must be positive".into()));
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.steps_per_iteration == 0 {
            return Err(Error::Contract(
                "epochs, minibatch_size and steps_per_iteration must be >= 1".into(),
            ));
        }
        if !(self.gamma > T::zero() && self.gamma <= T::one()) {
            return Err(Error::Contract(format!("gamma must be in (0,1], got {}", self.gamma)));
        }
        if !(self.gamma_master > T::zero() && self.gamma_master <= T::one()) {
            return Err(Error::Contract(format!(
                "gamma_master must be in (0,1], got {}",
                self.gamma_master
            )));
        }
        if !(self.lambda >= T::zero() && self.lambda <= T::one()) {
            return Err(Error::Contract(format!("lambda must be in [0,1], got {}", self.lambda)));
        }
        if self.max_grad_norm <= T::zero() {
            return Err(Error::Contract("max_grad_norm must be positive".into()));
        }
        if self.lr_policy <= T::zero() || self.lr_value <= T::zero() || self.lr_master <= T::zero()
        {
            return Err(Error::Contract("learning rates must be positive".into()));
        }
        if self.lr_nom_scale <= T::zero() {
            return Err(Error::Contract("lr_nom_scale must be positive".into()));
        }
        Ok(())
    }
}

/// `min(ratio·A, clip(ratio, 1-ε, 1+ε)·A)` — the pessimistic surrogate.
pub fn clipped_surrogate<T: Scalar>(ratio: T, advantage: T, clip_eps: T) -> T {
    let one = T::one();
    let clipped = ratio.min(one + clip_eps).max(one - clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Actions stored by a batch: continuous vectors for Gaussian policies,
/// indices for the categorical master.
#[derive(Debug, Clone)]
pub enum ActionBatch<T> {
    Continuous(Vec<Vec<T>>),
    Discrete(Vec<usize>),
}

impl<T> ActionBatch<T> {
    pub fn len(&self) -> usize {
        match self {
            ActionBatch::Continuous(v) => v.len(),
            ActionBatch::Discrete(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One update's worth of transitions. `old_log_probs` are the log
/// probabilities recorded when the actions were taken; ratios are always
/// computed against them, never against intermediate update steps.
#[derive(Debug, Clone)]
pub struct PpoBatch<T> {
    pub observations: Vec<Vec<T>>,
    pub actions: ActionBatch<T>,
    pub old_log_probs: Vec<T>,
    pub advantages: Vec<T>,
    pub returns: Vec<T>,
}

impl<T: Scalar> PpoBatch<T> {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.actions.len() != n
            || self.old_log_probs.len() != n
            || self.advantages.len() != n
            || self.returns.len() != n
        {
            return Err(Error::Dimension(format!(
                "batch columns disagree: obs {}, actions {}, logp {}, adv {}, ret {}",
                n,
                self.actions.len(),
                self.old_log_probs.len(),
                self.advantages.len(),
                self.returns.len()
            )));
        }
        for v in self.advantages.iter().chain(&self.old_log_probs).chain(&self.returns) {
            if !v.is_finite() {
                return Err(Error::NonFinite("batch entry".into()));
            }
        }
        Ok(())
    }
}

/// Post-update diagnostics over the full batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoStats<T> {
    /// True when the batch was empty and the update was a no-op.
    pub skipped: bool,
    pub surrogate: T,
    pub value_loss: T,
    /// Mean (old - new) log-prob; a cheap divergence estimate.
    pub approx_kl: T,
    /// Fraction of ratios pushed outside the clip range.
    pub clip_fraction: T,
    pub entropy: T,
}

impl<T: Scalar> PpoStats<T> {
    pub fn skipped() -> Self {
        Self {
            skipped: true,
            surrogate: T::zero(),
            value_loss: T::zero(),
            approx_kl: T::zero(),
            clip_fraction: T::zero(),
            entropy: T::zero(),
        }
    }
}

const LN_2PI_E: f64 = 2.8378770664093453;

/// Entropy of a diagonal Gaussian with the given log standard deviations.
pub fn gaussian_entropy<T: Scalar>(log_std: &[T]) -> T {
    let half_ln_2pi_e = T::of(0.5 * LN_2PI_E);
    log_std.iter().map(|ls| *ls + half_ln_2pi_e).sum()
}

/// Entropy of a categorical distribution given its log probabilities.
pub fn categorical_entropy<T: Scalar>(log_probs: &[T]) -> T {
    -log_probs.iter().map(|lp| lp.exp() * *lp).sum::<T>()
}

/// Derivative of the surrogate with respect to the ratio: the advantage
/// where the unclipped branch is active, zero where the clip has frozen it.
fn surrogate_dratio<T: Scalar>(ratio: T, advantage: T, clip_eps: T) -> T {
    let one = T::one();
    let active = if advantage >= T::zero() {
        ratio <= one + clip_eps
    } else {
        ratio >= one - clip_eps
    };
    if active {
        advantage
    } else {
        T::zero()
    }
}

/// Negated clipped surrogate plus entropy bonus, averaged over a subset of a
/// batch; minimizing it maximizes the PPO objective. Public so finite
/// difference oracles outside this module can evaluate the exact same loss.
pub struct PolicyLoss<'a, T> {
    pub batch: &'a PpoBatch<T>,
    pub advantages: &'a [T],
    pub indices: &'a [usize],
    pub clip_eps: T,
    pub entropy_coef: T,
}

impl<T: Scalar> PolicyLoss<'_, T> {
    fn inv_n(&self) -> T {
        T::one() / T::of(self.indices.len() as f64)
    }
}

impl<T: Scalar> BatchLoss<T> for PolicyLoss<'_, T> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn input(&self, i: usize) -> &[T] {
        &self.batch.observations[self.indices[i]]
    }

    fn sample_loss(&self, i: usize, output: &[T], log_std: &[T]) -> SampleLoss<T> {
        let k = self.indices[i];
        let adv = self.advantages[k];
        let old_lp = self.batch.old_log_probs[k];
        let inv_n = self.inv_n();
        match &self.batch.actions {
            ActionBatch::Continuous(actions) => {
                let action = &actions[k];
                let new_lp = gaussian_log_prob(output, log_std, action);
                let ratio = (new_lp - old_lp).exp();
                let surr = clipped_surrogate(ratio, adv, self.clip_eps);
                let entropy = gaussian_entropy(log_std);
                let loss = -(surr + self.entropy_coef * entropy) * inv_n;
                // d surr / d logp_new = (d surr/d r) * r
                let dsurr_dlp = surrogate_dratio(ratio, adv, self.clip_eps) * ratio;
                let mut d_output = Vec::with_capacity(output.len());
                let mut d_log_std = Vec::with_capacity(output.len());
                for d in 0..output.len() {
                    let inv_var = (T::of(-2.0) * log_std[d]).exp();
                    let diff = action[d] - output[d];
                    // d logp / d mean_d and d logp / d log_std_d
                    let dlp_dmean = diff * inv_var;
                    let z2 = diff * diff * inv_var;
                    let dlp_dls = z2 - T::one();
                    d_output.push(-dsurr_dlp * dlp_dmean * inv_n);
                    d_log_std.push(-(dsurr_dlp * dlp_dls + self.entropy_coef) * inv_n);
                }
                SampleLoss {
                    loss,
                    d_output,
                    d_log_std,
                }
            }
            ActionBatch::Discrete(actions) => {
                let chosen = actions[k];
                let log_probs = log_softmax(output);
                let new_lp = log_probs[chosen];
                let ratio = (new_lp - old_lp).exp();
                let surr = clipped_surrogate(ratio, adv, self.clip_eps);
                let entropy = categorical_entropy(&log_probs);
                let loss = -(surr + self.entropy_coef * entropy) * inv_n;
                let dsurr_dlp = surrogate_dratio(ratio, adv, self.clip_eps) * ratio;
                let d_output = (0..output.len())
                    .map(|j| {
                        let p_j = log_probs[j].exp();
                        let indicator = if j == chosen { T::one() } else { T::zero() };
                        let dlp_dlogit = indicator - p_j;
                        let dent_dlogit = -p_j * (log_probs[j] + entropy);
                        -(dsurr_dlp * dlp_dlogit + self.entropy_coef * dent_dlogit) * inv_n
                    })
                    .collect();
                SampleLoss {
                    loss,
                    d_output,
                    d_log_std: Vec::new(),
                }
            }
        }
    }
}

/// `c_v · mean((V(s) - R)²)` over a subset of a batch.
pub struct ValueLoss<'a, T> {
    pub batch: &'a PpoBatch<T>,
    pub indices: &'a [usize],
    pub value_coef: T,
}

impl<T: Scalar> BatchLoss<T> for ValueLoss<'_, T> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn input(&self, i: usize) -> &[T] {
        &self.batch.observations[self.indices[i]]
    }

    fn sample_loss(&self, i: usize, output: &[T], _log_std: &[T]) -> SampleLoss<T> {
        let k = self.indices[i];
        let inv_n = T::one() / T::of(self.indices.len() as f64);
        let err = output[0] - self.batch.returns[k];
        SampleLoss {
            loss: self.value_coef * err * err * inv_n,
            d_output: vec![self.value_coef * T::of(2.0) * err * inv_n],
            d_log_std: Vec::new(),
        }
    }
}

/// Scale a gradient down to `max_norm` if its global l2 norm exceeds it.
fn clip_grad_norm<T: Scalar>(gradient: &mut [T], max_norm: T) {
    let norm = gradient.iter().map(|g| *g * *g).sum::<T>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in gradient.iter_mut() {
            *g *= scale;
        }
    }
}

/// Zero-mean/unit-variance advantages (population std, small-eps guard).
/// Batches of fewer than two samples are returned unchanged — there is no
/// variance to normalize away.
fn normalized_advantages<T: Scalar>(advantages: &[T], enabled: bool) -> Vec<T> {
    if !enabled || advantages.len() < 2 {
        return advantages.to_vec();
    }
    let n = T::of(advantages.len() as f64);
    let mean = advantages.iter().copied().sum::<T>() / n;
    let var = advantages.iter().map(|a| (*a - mean) * (*a - mean)).sum::<T>() / n;
    let denom = var.sqrt() + T::of(1e-8);
    advantages.iter().map(|a| (*a - mean) / denom).collect()
}

fn shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// One full PPO update of a policy/value pair on a batch. Empty batches are
/// skipped (reported via [`PpoStats::skipped`]); otherwise runs
/// `cfg.epochs` × shuffled minibatches of clipped Adam steps and returns
/// diagnostics measured after the last step.
pub fn ppo_update<T: Scalar, R: Rng>(
    policy: &mut ParamSet<T>,
    value: &mut ParamSet<T>,
    batch: &PpoBatch<T>,
    cfg: &PpoConfig<T>,
    opt_policy: &mut OptState<T>,
    opt_value: &mut OptState<T>,
    rng: &mut R,
) -> Result<PpoStats<T>> {
    cfg.validate()?;
    if batch.is_empty() {
        return Ok(PpoStats::skipped());
    }
    batch.validate()?;
    match (&batch.actions, policy.head_kind()) {
        (ActionBatch::Continuous(_), HeadKind::Gaussian)
        | (ActionBatch::Discrete(_), HeadKind::Categorical) => {}
        _ => {
            return Err(Error::Contract(
                "action batch kind does not match the policy head".into(),
            ))
        }
    }

    let advantages = normalized_advantages(&batch.advantages, cfg.normalize_advantages);
    let n = batch.len();
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..cfg.epochs {
        shuffle(&mut order, rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let policy_loss = PolicyLoss {
                batch,
                advantages: &advantages,
                indices: chunk,
                clip_eps: cfg.clip_eps,
                entropy_coef: cfg.entropy_coef,
            };
            let (_, mut pg) = grad(policy, &policy_loss)?;
            clip_grad_norm(&mut pg, cfg.max_grad_norm);
            adam_step(policy, &pg, opt_policy)?;

            let value_loss = ValueLoss {
                batch,
                indices: chunk,
                value_coef: cfg.value_coef,
            };
            let (_, mut vg) = grad(value, &value_loss)?;
            clip_grad_norm(&mut vg, cfg.max_grad_norm);
            adam_step(value, &vg, opt_value)?;
        }
    }

    // diagnostics at the post-update parameters, over the full batch
    let mut surrogate = T::zero();
    let mut value_loss_total = T::zero();
    let mut approx_kl = T::zero();
    let mut clipped_count = 0usize;
    let mut entropy = T::zero();
    for i in 0..n {
        let obs = &batch.observations[i];
        let new_lp = match &batch.actions {
            ActionBatch::Continuous(actions) => {
                let mean = forward(policy, obs)?;
                let lp = gaussian_log_prob(&mean, policy.log_std(), &actions[i]);
                entropy += gaussian_entropy(policy.log_std());
                lp
            }
            ActionBatch::Discrete(actions) => {
                let log_probs = log_softmax(&forward(policy, obs)?);
                entropy += categorical_entropy(&log_probs);
                log_probs[actions[i]]
            }
        };
        let ratio = (new_lp - batch.old_log_probs[i]).exp();
        surrogate += clipped_surrogate(ratio, advantages[i], cfg.clip_eps);
        approx_kl += batch.old_log_probs[i] - new_lp;
        if (ratio - T::one()).abs() > cfg.clip_eps {
            clipped_count += 1;
        }
        let v = forward(value, obs)?[0];
        let err = v - batch.returns[i];
        value_loss_total += err * err;
    }
    let n_t = T::of(n as f64);
    let stats = PpoStats {
        skipped: false,
        surrogate: surrogate / n_t,
        value_loss: value_loss_total / n_t,
        approx_kl: approx_kl / n_t,
        clip_fraction: T::of(clipped_count as f64 / n as f64),
        entropy: entropy / n_t,
    };
    if !(stats.surrogate.is_finite() && stats.value_loss.is_finite()) {
        return Err(Error::Numerical("non-finite loss after update".into()));
    }
    Ok(stats)
}
