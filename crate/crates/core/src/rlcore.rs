//! Trajectory storage, discounted returns, generalized advantage estimation,
//! and the two-component advantage coordinate the master policy observes.

use std::io::Write;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Controller indices stored in trajectories.
pub const NOMINAL: u8 = 0;
pub const ADVERSARIAL: u8 = 1;

/// Everything recorded about one environment step.
#[derive(Debug, Clone)]
pub struct StepRecord<T> {
    /// State before any perturbation.
    pub clean_state: Vec<T>,
    /// State as the agent saw it (perturbed while an attack is on).
    pub observed_state: Vec<T>,
    pub action: Vec<T>,
    pub reward: T,
    /// Log probability of `action` under the controlling sub-policy.
    pub log_prob: T,
    /// Value of `observed_state` under each sub-policy's value network.
    pub v_nom: T,
    pub v_adv: T,
    pub done: bool,
    /// Ground truth: was the adversary active this step. Only the oracle
    /// master and reporting may read this.
    pub attack_flag: bool,
    pub controller: u8,
    /// The master's observation when this step was chosen.
    pub coord: [T; 2],
    /// Log probability of `controller` under the master (0 for oracle).
    pub master_log_prob: T,
}

/// A fixed-length rollout stored column-wise, plus the trailing bootstrap
/// information needed to close off advantage computations.
#[derive(Debug, Clone, Default)]
pub struct Trajectory<T> {
    pub clean_states: Vec<Vec<T>>,
    pub observed_states: Vec<Vec<T>>,
    pub actions: Vec<Vec<T>>,
    pub rewards: Vec<T>,
    pub log_probs: Vec<T>,
    pub v_nom: Vec<T>,
    pub v_adv: Vec<T>,
    pub dones: Vec<bool>,
    pub attack_flags: Vec<bool>,
    pub controllers: Vec<u8>,
    pub coords: Vec<[T; 2]>,
    pub master_log_probs: Vec<T>,
    /// Observation following the last step, and its values/coordinate; used
    /// to bootstrap the final advantage (ignored when the last step is done).
    pub final_observed_state: Vec<T>,
    pub final_v_nom: T,
    pub final_v_adv: T,
    pub final_coord: [T; 2],
}

impl<T: Scalar> Trajectory<T> {
    pub fn with_capacity(t: usize) -> Self {
        Self {
            clean_states: Vec::with_capacity(t),
            observed_states: Vec::with_capacity(t),
            actions: Vec::with_capacity(t),
            rewards: Vec::with_capacity(t),
            log_probs: Vec::with_capacity(t),
            v_nom: Vec::with_capacity(t),
            v_adv: Vec::with_capacity(t),
            dones: Vec::with_capacity(t),
            attack_flags: Vec::with_capacity(t),
            controllers: Vec::with_capacity(t),
            coords: Vec::with_capacity(t),
            master_log_probs: Vec::with_capacity(t),
            final_observed_state: Vec::new(),
            final_v_nom: T::zero(),
            final_v_adv: T::zero(),
            final_coord: [T::zero(); 2],
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, rec: StepRecord<T>) {
        self.clean_states.push(rec.clean_state);
        self.observed_states.push(rec.observed_state);
        self.actions.push(rec.action);
        self.rewards.push(rec.reward);
        self.log_probs.push(rec.log_prob);
        self.v_nom.push(rec.v_nom);
        self.v_adv.push(rec.v_adv);
        self.dones.push(rec.done);
        self.attack_flags.push(rec.attack_flag);
        self.controllers.push(rec.controller);
        self.coords.push(rec.coord);
        self.master_log_probs.push(rec.master_log_prob);
    }

    /// Column lengths agree, rewards are finite, controllers are in range.
    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let lens = [
            self.clean_states.len(),
            self.observed_states.len(),
            self.actions.len(),
            self.log_probs.len(),
            self.v_nom.len(),
            self.v_adv.len(),
            self.dones.len(),
            self.attack_flags.len(),
            self.controllers.len(),
            self.coords.len(),
            self.master_log_probs.len(),
        ];
        if lens.iter().any(|&l| l != t) {
            return Err(Error::Dimension(format!(
                "trajectory columns disagree on length: {lens:?} vs {t}"
            )));
        }
        for r in &self.rewards {
            if !r.is_finite() {
                return Err(Error::NonFinite("trajectory reward".into()));
            }
        }
        if self.controllers.iter().any(|&c| c > ADVERSARIAL) {
            return Err(Error::Contract("controller index out of range".into()));
        }
        Ok(())
    }

    /// Value of `observed_states[i]` (or the final bootstrap state for
    /// `i == len()`) under the given sub-policy's value network.
    pub fn value_at(&self, i: usize, controller: u8) -> T {
        if i == self.len() {
            if controller == NOMINAL {
                self.final_v_nom
            } else {
                self.final_v_adv
            }
        } else if controller == NOMINAL {
            self.v_nom[i]
        } else {
            self.v_adv[i]
        }
    }

    /// CSV dump: `t,s...,a...,r,logp,v_nom,v_adv,done,attack_flag,controller`.
    /// States written are the observed (post-perturbation) ones.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let s_dim = self.observed_states.first().map_or(0, Vec::len);
        let a_dim = self.actions.first().map_or(0, Vec::len);
        let mut header = String::from("t");
        for i in 0..s_dim {
            header.push_str(&format!(",s{i}"));
        }
        for i in 0..a_dim {
            header.push_str(&format!(",a{i}"));
        }
        header.push_str(",r,logp,v_nom,v_adv,done,attack_flag,controller");
        writeln!(out, "{header}")?;
        for t in 0..self.len() {
            let mut row = format!("{t}");
            for s in &self.observed_states[t] {
                row.push_str(&format!(",{s}"));
            }
            for a in &self.actions[t] {
                row.push_str(&format!(",{a}"));
            }
            row.push_str(&format!(
                ",{},{},{},{},{},{},{}",
                self.rewards[t],
                self.log_probs[t],
                self.v_nom[t],
                self.v_adv[t],
                u8::from(self.dones[t]),
                u8::from(self.attack_flags[t]),
                self.controllers[t],
            ));
            writeln!(out, "{row}")?;
        }
        Ok(())
    }
}

/// Σ γ^t r_t, evaluated backward (Horner) for accuracy. Empty input is 0.
pub fn discounted_return<T: Scalar>(rewards: &[T], gamma: T) -> T {
    let mut acc = T::zero();
    for r in rewards.iter().rev() {
        acc = *r + gamma * acc;
    }
    acc
}

/// The master's observation: the same trailing window of experience scored
/// under each sub-policy's value function. By construction it depends only
/// on rewards, states and the two value functions — never on which
/// sub-policy acted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvantageCoordinate<T> {
    pub a_nom: T,
    pub a_adv: T,
}

impl<T: Scalar> AdvantageCoordinate<T> {
    pub fn zero() -> Self {
        Self {
            a_nom: T::zero(),
            a_adv: T::zero(),
        }
    }

    pub fn as_array(&self) -> [T; 2] {
        [self.a_nom, self.a_adv]
    }

    pub fn validate(&self) -> Result<()> {
        if self.a_nom.is_finite() && self.a_adv.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("advantage coordinate".into()))
        }
    }
}

/// Generalized advantage estimates by backward recursion.
///
/// `values` must hold one bootstrap entry beyond `rewards`; a done flag at
/// step `t` truncates the recursion there (the bootstrap across a terminal
/// boundary is treated as zero).
pub fn gae<T: Scalar>(
    rewards: &[T],
    values: &[T],
    dones: &[bool],
    gamma: T,
    lambda: T,
) -> Result<Vec<T>> {
    let t_len = rewards.len();
    if values.len() != t_len + 1 || dones.len() != t_len {
        return Err(Error::Dimension(format!(
            "gae needs |values| = |rewards|+1 and |dones| = |rewards|; got {} rewards, {} values, {} dones",
            t_len,
            values.len(),
            dones.len()
        )));
    }
    let mut advantages = vec![T::zero(); t_len];
    let mut carry = T::zero();
    for t in (0..t_len).rev() {
        let nonterminal = if dones[t] { T::zero() } else { T::one() };
        let residual = rewards[t] + gamma * values[t + 1] * nonterminal - values[t];
        carry = residual + gamma * lambda * nonterminal * carry;
        advantages[t] = carry;
    }
    Ok(advantages)
}

/// Advantage coordinate from already-evaluated value sequences (each of
/// length `rewards.len() + 1`, last entry the bootstrap at the current
/// state). This is the rollout hot path; [`advantage_coordinate`] wraps it.
pub fn advantage_coordinate_from_values<T: Scalar>(
    rewards: &[T],
    dones: &[bool],
    values_nom: &[T],
    values_adv: &[T],
    gamma: T,
    lambda: T,
) -> Result<AdvantageCoordinate<T>> {
    if rewards.is_empty() {
        return Err(Error::Contract("advantage coordinate needs a window of >= 1 step".into()));
    }
    let a_nom = gae(rewards, values_nom, dones, gamma, lambda)?[0];
    let a_adv = gae(rewards, values_adv, dones, gamma, lambda)?[0];
    let coord = AdvantageCoordinate { a_nom, a_adv };
    coord.validate()?;
    Ok(coord)
}

/// Advantage coordinate over a trailing window: evaluate both value
/// functions on the stored (perturbed) window states plus the current state,
/// then take the window-start advantage under each.
pub fn advantage_coordinate<T, F, G>(
    window_states: &[Vec<T>],
    current_state: &[T],
    rewards: &[T],
    dones: &[bool],
    value_nom: F,
    value_adv: G,
    gamma: T,
    lambda: T,
) -> Result<AdvantageCoordinate<T>>
where
    T: Scalar,
    F: Fn(&[T]) -> Result<T>,
    G: Fn(&[T]) -> Result<T>,
{
    if window_states.len() != rewards.len() {
        return Err(Error::Dimension(format!(
            "window has {} states but {} rewards",
            window_states.len(),
            rewards.len()
        )));
    }
    let mut values_nom = Vec::with_capacity(rewards.len() + 1);
    let mut values_adv = Vec::with_capacity(rewards.len() + 1);
    for s in window_states {
        values_nom.push(value_nom(s)?);
        values_adv.push(value_adv(s)?);
    }
    values_nom.push(value_nom(current_state)?);
    values_adv.push(value_adv(current_state)?);
    advantage_coordinate_from_values(rewards, dones, &values_nom, &values_adv, gamma, lambda)
}

/// Maximal runs of constant controller: `(start, end_exclusive, controller)`
/// tiles `0..controllers.len()` exactly.
pub fn segments(controllers: &[u8]) -> Vec<(usize, usize, u8)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=controllers.len() {
        if i == controllers.len() || controllers[i] != controllers[start] {
            out.push((start, i, controllers[start]));
            start = i;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn discounted_return_basics() {
        assert_eq!(discounted_return::<f64>(&[], 0.9), 0.0);
        assert_eq!(discounted_return(&[0.0, 0.0, 0.0], 0.9), 0.0);
        assert_abs_diff_eq!(discounted_return(&[1.0, 1.0, 1.0], 0.5), 1.75, epsilon = 1e-15);
        let long = vec![1.0; 1000];
        let closed_form = (1.0 - 0.99f64.powi(1000)) / 0.01;
        assert_abs_diff_eq!(discounted_return(&long, 0.99), closed_form, epsilon = 1e-10);
        assert_abs_diff_eq!(discounted_return(&long, 0.99), 99.9957, epsilon = 1e-4);
    }

    /// Direct double-sum evaluation of the advantage definition, truncating
    /// at terminal steps; deliberately naive.
    fn gae_oracle(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
        let t_len = rewards.len();
        let mut out = vec![0.0; t_len];
        for t in 0..t_len {
            let mut acc = 0.0;
            let mut weight = 1.0;
            for l in t..t_len {
                let boot = if dones[l] { 0.0 } else { values[l + 1] };
                acc += weight * (rewards[l] + gamma * boot - values[l]);
                if dones[l] {
                    break;
                }
                weight *= gamma * lambda;
            }
            out[t] = acc;
        }
        out
    }

    fn random_instance(rng: &mut impl Rng, t_len: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let rewards: Vec<f64> = (0..t_len).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let values: Vec<f64> = (0..=t_len).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let dones: Vec<bool> = (0..t_len).map(|_| rng.random::<f64>() < 0.08).collect();
        (rewards, values, dones)
    }

    #[test]
    fn gae_matches_double_sum_oracle() {
        let mut rng = crate::rng::stream(17, "rlcore-test");
        for _ in 0..200 {
            let (r, v, d) = random_instance(&mut rng, 50);
            let fast = gae(&r, &v, &d, 0.99, 0.95).unwrap();
            let slow = gae_oracle(&r, &v, &d, 0.99, 0.95);
            for (f, s) in fast.iter().zip(slow.iter()) {
                assert_abs_diff_eq!(f, s, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn gae_lambda_zero_is_the_td_residual() {
        let mut rng = crate::rng::stream(18, "rlcore-test");
        let (r, v, d) = random_instance(&mut rng, 40);
        let adv = gae(&r, &v, &d, 0.97, 0.0).unwrap();
        for t in 0..r.len() {
            let boot = if d[t] { 0.0 } else { v[t + 1] };
            let residual = r[t] + 0.97 * boot - v[t];
            assert_eq!(adv[t], residual, "lambda=0 must be the exact TD residual");
        }
    }

    #[test]
    fn gae_hand_example_undiscounted() {
        let adv = gae(&[1.0, 1.0], &[0.0, 0.0, 0.0], &[false, false], 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![2.0, 1.0]);
    }

    #[test]
    fn gae_lambda_one_is_return_minus_baseline() {
        let mut rng = crate::rng::stream(19, "rlcore-test");
        let gamma = 0.99;
        for _ in 0..50 {
            let (r, v, d) = random_instance(&mut rng, 60);
            let adv = gae(&r, &v, &d, gamma, 1.0).unwrap();
            for t in 0..r.len() {
                // discounted return from t to episode end (or bootstrap)
                let mut g = 0.0;
                let mut w = 1.0;
                let mut l = t;
                loop {
                    g += w * r[l];
                    if d[l] {
                        break;
                    }
                    if l + 1 == r.len() {
                        g += w * gamma * v[r.len()];
                        break;
                    }
                    w *= gamma;
                    l += 1;
                }
                assert_abs_diff_eq!(adv[t], g - v[t], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn gae_rejects_mismatched_lengths() {
        assert!(gae(&[1.0], &[0.0], &[false], 0.9, 0.9).is_err());
        assert!(gae(&[1.0], &[0.0, 0.0], &[false, true], 0.9, 0.9).is_err());
    }

    #[test]
    fn coordinate_identical_value_functions_coincide() {
        let states = vec![vec![0.1], vec![0.2], vec![0.3]];
        let rewards = [1.0, -0.5, 2.0];
        let dones = [false, false, false];
        let vf = |s: &[f64]| Ok(3.0 * s[0]);
        let coord = advantage_coordinate(&states, &[0.4], &rewards, &dones, vf, vf, 0.99, 0.95)
            .unwrap();
        assert_eq!(coord.a_nom, coord.a_adv);
    }

    #[test]
    fn coordinate_one_step_residual() {
        // h=1: r=2, V(s)=1, V(s')=1, gamma=0.99 -> 2 + 0.99 - 1 = 1.99
        let coord = advantage_coordinate_from_values(
            &[2.0],
            &[false],
            &[1.0, 1.0],
            &[0.5, 0.5],
            0.99,
            0.95,
        )
        .unwrap();
        assert_abs_diff_eq!(coord.a_nom, 1.99, epsilon = 1e-15);
        assert_abs_diff_eq!(coord.a_adv, 2.0 + 0.99 * 0.5 - 0.5, epsilon = 1e-15);
    }

    #[test]
    fn coordinate_window_of_five_matches_oracle() {
        let mut rng = crate::rng::stream(20, "rlcore-test");
        let (r, v, d) = random_instance(&mut rng, 5);
        let v_adv: Vec<f64> = v.iter().map(|x| x * 0.5 + 0.1).collect();
        let coord = advantage_coordinate_from_values(&r, &d, &v, &v_adv, 0.99, 0.95).unwrap();
        let want_nom = gae_oracle(&r, &v, &d, 0.99, 0.95)[0];
        let want_adv = gae_oracle(&r, &v_adv, &d, 0.99, 0.95)[0];
        assert_abs_diff_eq!(coord.a_nom, want_nom, epsilon = 1e-10);
        assert_abs_diff_eq!(coord.a_adv, want_adv, epsilon = 1e-10);
    }

    #[test]
    fn coordinate_empty_window_is_an_error() {
        let r = advantage_coordinate_from_values::<f64>(&[], &[], &[0.0], &[0.0], 0.99, 0.95);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn coordinate_closure_and_value_paths_agree() {
        let states = vec![vec![0.5, 1.0], vec![-0.25, 0.0]];
        let current = [1.0, -1.0];
        let rewards = [0.3, -0.7];
        let dones = [false, false];
        let vn = |s: &[f64]| Ok(s[0] + 2.0 * s[1]);
        let va = |s: &[f64]| Ok(s[0] * s[1]);
        let via_fn =
            advantage_coordinate(&states, &current, &rewards, &dones, vn, va, 0.9, 0.8).unwrap();
        let nom_vals = [2.5, -0.25, -1.0];
        let adv_vals = [0.5, 0.0, -1.0];
        let via_vals =
            advantage_coordinate_from_values(&rewards, &dones, &nom_vals, &adv_vals, 0.9, 0.8)
                .unwrap();
        assert_eq!(via_fn, via_vals);
    }

    #[test]
    fn segments_split_at_controller_changes() {
        assert_eq!(segments(&[]), vec![]);
        assert_eq!(segments(&[0, 0, 0]), vec![(0, 3, 0)]);
        assert_eq!(
            segments(&[0, 0, 1, 1, 0]),
            vec![(0, 2, 0), (2, 4, 1), (4, 5, 0)]
        );
        assert_eq!(segments(&[1]), vec![(0, 1, 1)]);
    }

    #[test]
    fn trajectory_push_validate_and_csv() {
        let mut traj = Trajectory::<f64>::with_capacity(2);
        traj.push(StepRecord {
            clean_state: vec![0.0, 0.0],
            observed_state: vec![0.5, 0.25],
            action: vec![1.0],
            reward: -0.5,
            log_prob: -1.25,
            v_nom: 0.125,
            v_adv: -0.75,
            done: false,
            attack_flag: true,
            controller: ADVERSARIAL,
            coord: [0.0, 0.0],
            master_log_prob: 0.0,
        });
        traj.push(StepRecord {
            clean_state: vec![0.1, 0.2],
            observed_state: vec![0.1, 0.2],
            action: vec![-1.0],
            reward: 1.0,
            log_prob: -0.5,
            v_nom: 0.25,
            v_adv: 0.5,
            done: true,
            attack_flag: false,
            controller: NOMINAL,
            coord: [1.0, -1.0],
            master_log_prob: -0.69,
        });
        traj.final_observed_state = vec![0.0, 0.0];
        traj.validate().unwrap();
        assert_eq!(traj.len(), 2);
        assert_eq!(traj.value_at(0, NOMINAL), 0.125);
        assert_eq!(traj.value_at(2, ADVERSARIAL), 0.0);

        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let want = "t,s0,s1,a0,r,logp,v_nom,v_adv,done,attack_flag,controller\n\
                    0,0.5,0.25,1,-0.5,-1.25,0.125,-0.75,0,1,1\n\
                    1,0.1,0.2,-1,1,-0.5,0.25,0.5,1,0,0\n";
        assert_eq!(text, want);
    }

    #[test]
    fn trajectory_validation_catches_bad_columns() {
        let mut traj = Trajectory::<f64>::with_capacity(1);
        traj.rewards.push(1.0);
        assert!(traj.validate().is_err());
        let mut traj = Trajectory::<f64>::with_capacity(1);
        traj.push(StepRecord {
            clean_state: vec![0.0],
            observed_state: vec![0.0],
            action: vec![0.0],
            reward: f64::NAN,
            log_prob: 0.0,
            v_nom: 0.0,
            v_adv: 0.0,
            done: false,
            attack_flag: false,
            controller: NOMINAL,
            coord: [0.0, 0.0],
            master_log_prob: 0.0,
        });
        assert!(matches!(traj.validate(), Err(Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn gae_is_linear_in_rewards(
            r1 in proptest::collection::vec(-2.0f64..2.0, 1..30),
            seed in 0u64..100,
        ) {
            let t_len = r1.len();
            let mut rng = crate::rng::stream(seed, "rlcore-prop");
            let r2: Vec<f64> = (0..t_len).map(|_| rng.random::<f64>() - 0.5).collect();
            let dones: Vec<bool> = (0..t_len).map(|_| rng.random::<f64>() < 0.1).collect();
            let zeros = vec![0.0; t_len + 1];
            let sum: Vec<f64> = r1.iter().zip(r2.iter()).map(|(a, b)| a + b).collect();
            let g1 = gae(&r1, &zeros, &dones, 0.99, 0.95).unwrap();
            let g2 = gae(&r2, &zeros, &dones, 0.99, 0.95).unwrap();
            let gs = gae(&sum, &zeros, &dones, 0.99, 0.95).unwrap();
            for t in 0..t_len {
                prop_assert!((gs[t] - (g1[t] + g2[t])).abs() < 1e-10);
            }
        }

        #[test]
        fn segments_tile_the_whole_range(controllers in proptest::collection::vec(0u8..2, 0..64)) {
            let segs = segments(&controllers);
            let mut cursor = 0;
            for (start, end, c) in &segs {
                prop_assert_eq!(*start, cursor);
                prop_assert!(*end > *start);
                for i in *start..*end {
                    prop_assert_eq!(controllers[i], *c);
                }
                cursor = *end;
            }
            prop_assert_eq!(cursor, controllers.len());
            // adjacent segments differ in controller
            for w in segs.windows(2) {
                prop_assert!(w[0].2 != w[1].2);
            }
        }
    }
}
