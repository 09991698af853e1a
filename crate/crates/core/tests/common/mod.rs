//! Shared finite-difference oracle for the PPO loss gradients, used by both
//! the dedicated gradient test and the acceptance suite.

use mlah_core::approximator::{
    forward, gaussian_log_prob, grad, log_softmax, loss_value, HeadKind, ParamSet,
};
use mlah_core::ppo::{ActionBatch, PolicyLoss, PpoBatch, ValueLoss};
use mlah_core::rng::stream;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
/// Keep every importance ratio this far away from the clip boundaries so the
/// difference quotient never straddles the surrogate's kink.
pub const KINK_MARGIN: f64 = 0.02;
pub const CLIP_EPS: f64 = 0.2;

/// Object-safe wrapper so Gaussian-policy, categorical-policy and value
/// losses share the comparison loop.
pub trait ObjectiveDyn {
    fn value(&self, params: &ParamSet<f64>) -> f64;
    fn grad(&self, params: &ParamSet<f64>) -> (f64, Vec<f64>);
}

pub struct PolicyObjective<'a> {
    pub batch: &'a PpoBatch<f64>,
    pub indices: Vec<usize>,
}

impl ObjectiveDyn for PolicyObjective<'_> {
    fn value(&self, params: &ParamSet<f64>) -> f64 {
        let loss = PolicyLoss {
            batch: self.batch,
            advantages: &self.batch.advantages,
            indices: &self.indices,
            clip_eps: CLIP_EPS,
            entropy_coef: 0.01,
        };
        loss_value(params, &loss).unwrap()
    }

    fn grad(&self, params: &ParamSet<f64>) -> (f64, Vec<f64>) {
        let loss = PolicyLoss {
            batch: self.batch,
            advantages: &self.batch.advantages,
            indices: &self.indices,
            clip_eps: CLIP_EPS,
            entropy_coef: 0.01,
        };
        grad(params, &loss).unwrap()
    }
}

pub struct ValueObjective<'a> {
    pub batch: &'a PpoBatch<f64>,
    pub indices: Vec<usize>,
}

impl ObjectiveDyn for ValueObjective<'_> {
    fn value(&self, params: &ParamSet<f64>) -> f64 {
        let loss = ValueLoss {
            batch: self.batch,
            indices: &self.indices,
            value_coef: 0.5,
        };
        loss_value(params, &loss).unwrap()
    }

    fn grad(&self, params: &ParamSet<f64>) -> (f64, Vec<f64>) {
        let loss = ValueLoss {
            batch: self.batch,
            indices: &self.indices,
            value_coef: 0.5,
        };
        grad(params, &loss).unwrap()
    }
}

pub fn central_difference(params: &ParamSet<f64>, loss: &dyn ObjectiveDyn, i: usize) -> f64 {
    let mut flat = params.flat_params();
    let base = flat[i];
    flat[i] = base + FD_STEP;
    let mut plus = params.clone();
    plus.set_flat_params(&flat).unwrap();
    flat[i] = base - FD_STEP;
    let mut minus = params.clone();
    minus.set_flat_params(&flat).unwrap();
    (loss.value(&plus) - loss.value(&minus)) / (2.0 * FD_STEP)
}

fn random_observation<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// An `old_log_prob` whose importance ratio sits away from both clip kinks.
/// About half the samples land inside the clip band, half outside, so both
/// branches of the surrogate derivative get exercised.
fn old_log_prob_off_kink<R: Rng>(new_lp: f64, rng: &mut R) -> f64 {
    loop {
        let shift: f64 = rng.random_range(-0.5..0.5);
        let ratio = shift.exp();
        if (ratio - (1.0 + CLIP_EPS)).abs() > KINK_MARGIN
            && (ratio - (1.0 - CLIP_EPS)).abs() > KINK_MARGIN
        {
            // ratio = exp(new - old)  =>  old = new - ln(ratio)
            return new_lp - shift;
        }
    }
}

pub fn gaussian_policy_case(seed: u64) -> (ParamSet<f64>, PpoBatch<f64>) {
    let mut rng = stream(seed, "FD_GAUSSIAN");
    let obs_dim = rng.random_range(2..6);
    let act_dim = rng.random_range(1..4);
    let hidden = rng.random_range(4..12);
    let shapes = [(obs_dim, hidden), (hidden, hidden), (hidden, act_dim)];
    let mut params = ParamSet::init(&shapes, HeadKind::Gaussian, 0.5, &mut rng).unwrap();
    // Random but moderate log-std so inverse variances stay well conditioned.
    let log_std: Vec<f64> = (0..act_dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    let flat = params.flat_params();
    let split = flat.len() - act_dim;
    let mut with_std = flat[..split].to_vec();
    with_std.extend_from_slice(&log_std);
    params.set_flat_params(&with_std).unwrap();

    let n = rng.random_range(8..32);
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    let mut old_log_probs = Vec::new();
    let mut advantages = Vec::new();
    for _ in 0..n {
        let obs = random_observation(obs_dim, &mut rng);
        let mean = forward(&params, &obs).unwrap();
        let action: Vec<f64> = mean
            .iter()
            .map(|m| m + rng.random_range(-1.5..1.5))
            .collect();
        let new_lp = gaussian_log_prob(&mean, params.log_std(), &action);
        old_log_probs.push(old_log_prob_off_kink(new_lp, &mut rng));
        advantages.push(rng.random_range(-2.0..2.0));
        observations.push(obs);
        actions.push(action);
    }
    let returns = vec![0.0; n];
    let batch = PpoBatch {
        observations,
        actions: ActionBatch::Continuous(actions),
        old_log_probs,
        advantages,
        returns,
    };
    (params, batch)
}

pub fn categorical_policy_case(seed: u64) -> (ParamSet<f64>, PpoBatch<f64>) {
    let mut rng = stream(seed, "FD_CATEGORICAL");
    let obs_dim = rng.random_range(2..5);
    let n_actions = rng.random_range(2..5);
    let hidden = rng.random_range(4..10);
    let shapes = [(obs_dim, hidden), (hidden, n_actions)];
    let params = ParamSet::init(&shapes, HeadKind::Categorical, 0.5, &mut rng).unwrap();

    let n = rng.random_range(8..32);
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    let mut old_log_probs = Vec::new();
    let mut advantages = Vec::new();
    for _ in 0..n {
        let obs = random_observation(obs_dim, &mut rng);
        let logits = forward(&params, &obs).unwrap();
        let log_probs = log_softmax(&logits);
        let chosen = rng.random_range(0..n_actions);
        old_log_probs.push(old_log_prob_off_kink(log_probs[chosen], &mut rng));
        advantages.push(rng.random_range(-2.0..2.0));
        observations.push(obs);
        actions.push(chosen);
    }
    let returns = vec![0.0; n];
    let batch = PpoBatch {
        observations,
        actions: ActionBatch::Discrete(actions),
        old_log_probs,
        advantages,
        returns,
    };
    (params, batch)
}

pub fn value_case(seed: u64) -> (ParamSet<f64>, PpoBatch<f64>) {
    let mut rng = stream(seed, "FD_VALUE");
    let obs_dim = rng.random_range(2..6);
    let hidden = rng.random_range(4..12);
    let shapes = [(obs_dim, hidden), (hidden, 1)];
    let params = ParamSet::init(&shapes, HeadKind::Scalar, 1.0, &mut rng).unwrap();

    let n = rng.random_range(8..32);
    let mut observations = Vec::new();
    let mut returns = Vec::new();
    for _ in 0..n {
        observations.push(random_observation(obs_dim, &mut rng));
        returns.push(rng.random_range(-5.0..5.0));
    }
    let old_log_probs = vec![0.0; n];
    let advantages = vec![0.0; n];
    let batch = PpoBatch {
        observations,
        actions: ActionBatch::Discrete(vec![0; n]),
        old_log_probs,
        advantages,
        returns,
    };
    (params, batch)
}

/// Worst relative disagreement between analytic and central-difference
/// gradients over every parameter coordinate.
pub fn worst_relative_error(params: &ParamSet<f64>, objective: &dyn ObjectiveDyn) -> f64 {
    let (_, analytic) = objective.grad(params);
    assert_eq!(analytic.len(), params.param_count());
    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        let fd = central_difference(params, objective, i);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-4);
        let rel = (analytic[i] - fd).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Worst relative gradient error across `trials` random nets/batches cycling
/// through the three loss families. Returns (worst, failing descriptions).
pub fn gradient_sweep(trials: u64) -> (f64, Vec<String>) {
    let mut failures = Vec::new();
    let mut overall = 0.0f64;
    for trial in 0..trials {
        let (worst, label) = match trial % 3 {
            0 => {
                let (params, batch) = gaussian_policy_case(1000 + trial);
                let objective = PolicyObjective {
                    batch: &batch,
                    indices: (0..batch.len()).collect(),
                };
                (worst_relative_error(&params, &objective), "gaussian")
            }
            1 => {
                let (params, batch) = categorical_policy_case(2000 + trial);
                let objective = PolicyObjective {
                    batch: &batch,
                    indices: (0..batch.len()).collect(),
                };
                (worst_relative_error(&params, &objective), "categorical")
            }
            _ => {
                let (params, batch) = value_case(3000 + trial);
                let objective = ValueObjective {
                    batch: &batch,
                    indices: (0..batch.len()).collect(),
                };
                (worst_relative_error(&params, &objective), "value")
            }
        };
        if worst > overall {
            overall = worst;
        }
        if worst > REL_TOL {
            failures.push(format!("trial {trial} ({label}): rel err {worst:.3e}"));
        }
    }
    (overall, failures)
}
