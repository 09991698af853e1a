//! Closed-form analysis of the two-state attack chain.
//!
//! A run alternates between a nominal condition and an attacked condition
//! according to a Markov chain with stay-nominal probability `m` and
//! return-to-nominal probability `n`. Conditioning a policy on the hidden
//! condition changes both the expected value it can achieve and the bias its
//! value estimator carries. This module computes those quantities exactly:
//! the stationary distribution, expected values of the unconditioned and
//! conditioned estimators, their biases, the perturbation budget `ε̃` a
//! biased advantage estimate tolerates before flipping sign, and the policy
//! improvement constant `C_min` above which conditioning provably raises the
//! discounted-return lower bound. A Monte-Carlo simulator cross-checks the
//! stationary formulas against the actual scheduler implementation.

use std::collections::BTreeMap;

use serde_json::json;

use crate::adversary::{advance_schedule, ScheduleMode, ScheduleState};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::Scalar;

/// Inputs for the chain analysis.
///
/// `v0`/`v1` are the value primitives: the expected discounted value under
/// purely nominal (`v0`) or purely attacked (`v1`) exposure. `alpha` is the
/// maximum total-variation divergence between the compared policies (an
/// input, not measured). `delta` is a representative state-value bias and
/// `max_abs_adv` the largest absolute advantage, both used by `ε̃`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainParams<T> {
    pub m: T,
    pub n: T,
    pub v0: T,
    pub v1: T,
    pub gamma: T,
    pub alpha: T,
    pub delta: T,
    pub max_abs_adv: T,
}

impl<T: Scalar> ChainParams<T> {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: T| x >= T::zero() && x <= T::one();
        if !(in_unit(self.m) && in_unit(self.n)) {
            return Err(Error::Contract(format!(
                "chain probabilities must lie in [0,1]: m={}, n={}",
                self.m, self.n
            )));
        }
        if !(self.gamma > T::zero() && self.gamma < T::one()) {
            return Err(Error::Contract(format!(
                "gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if self.alpha < T::zero() || self.max_abs_adv < T::zero() {
            return Err(Error::Contract(
                "alpha and max_abs_adv must be non-negative".into(),
            ));
        }
        for (name, v) in [
            ("v0", self.v0),
            ("v1", self.v1),
            ("delta", self.delta),
            ("alpha", self.alpha),
            ("max_abs_adv", self.max_abs_adv),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("chain parameter {name}")));
            }
        }
        Ok(())
    }

    /// Attacks are rarer than nominal steps: n < m.
    pub fn rarity_assumption_holds(&self) -> bool {
        self.n < self.m
    }

    /// Attacked exposure is worth less than nominal exposure: v1 < v0.
    pub fn value_ordering_holds(&self) -> bool {
        self.v1 < self.v0
    }
}

/// Stationary distribution `(p0, p1)` of the chain: fraction of time spent
/// nominal and attacked in the long run.
///
/// `p0 = n / (1 - m + n)`, `p1 = (1 - m) / (1 - m + n)`.
pub fn stationary<T: Scalar>(m: T, n: T) -> Result<(T, T)> {
    let denom = T::one() - m + n;
    if denom <= T::zero() {
        return Err(Error::DegenerateChain);
    }
    let p0 = n / denom;
    let p1 = (T::one() - m) / denom;
    Ok((p0, p1))
}

/// Expected value seen by the unconditioned estimator (stationary mixture)
/// and by the estimator conditioned on currently being nominal (one-step
/// mixture): `E_unc = v0·p0 + v1·p1`, `E_con = v0·m + v1·(1-m)`.
pub fn expected_values<T: Scalar>(cp: &ChainParams<T>) -> Result<(T, T)> {
    let (p0, p1) = stationary(cp.m, cp.n)?;
    let e_unc = cp.v0 * p0 + cp.v1 * p1;
    let e_con = cp.v0 * cp.m + cp.v1 * (T::one() - cp.m);
    Ok((e_unc, e_con))
}

/// Worst-case value-estimation biases: conditioned on nominal,
/// `δ_con = (1-m)(v0-v1)`; unconditioned, `δ_unc = (1-m)(v0-v1)/(1-m+n)`.
/// Under the rarity assumption and value ordering, `δ_con < δ_unc`.
pub fn biases<T: Scalar>(cp: &ChainParams<T>) -> Result<(T, T)> {
    let denom = T::one() - cp.m + cp.n;
    if denom <= T::zero() {
        return Err(Error::DegenerateChain);
    }
    let spread = (T::one() - cp.m) * (cp.v0 - cp.v1);
    Ok((spread, spread / denom))
}

/// Largest advantage-estimate perturbation that provably cannot flip the
/// sign of a policy-improvement step, given the value bias `delta`.
///
/// Three regimes, keyed on a representative advantage `a_hat`:
/// comfortably positive (`a_hat ≥ (1-γ)δ`), positive but below the bias
/// threshold, and non-positive. `a_hat` is caller-supplied because the
/// regime is a pointwise property while `max_abs_adv` is a bound.
pub fn epsilon_tilde<T: Scalar>(max_abs_adv: T, gamma: T, delta: T, a_hat: T) -> T {
    let threshold = (T::one() - gamma) * delta;
    if a_hat >= threshold {
        max_abs_adv + (gamma - T::one()) * delta
    } else if a_hat <= T::zero() {
        max_abs_adv + (T::one() - gamma) * delta
    } else {
        -max_abs_adv + (T::one() - gamma) * delta
    }
}

/// The conditioning-improvement bound: conditioning beats the unconditioned
/// estimator whenever the observed reward-bias gap `Δδ̂` stays below
/// `C_min · (v0 - v1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop2Bound<T> {
    pub c_min: T,
    pub delta_v: T,
}

impl<T: Scalar> Prop2Bound<T> {
    /// Does the improvement guarantee hold for the observed gap?
    pub fn holds(&self, delta_hat_gap: T) -> bool {
        delta_hat_gap < self.c_min * self.delta_v
    }
}

/// Minimal improvement constant
/// `C_min = (m-n)(1-m)(4γα² + 1 - γ) / ((1-m+n)(1-γ))`.
pub fn prop2_bound<T: Scalar>(cp: &ChainParams<T>) -> Result<Prop2Bound<T>> {
    cp.validate()?;
    let one = T::one();
    let four = T::of(4.0);
    let denom = (one - cp.m + cp.n) * (one - cp.gamma);
    if denom <= T::zero() {
        return Err(Error::DegenerateChain);
    }
    let c_min = (cp.m - cp.n) * (one - cp.m) * (four * cp.gamma * cp.alpha * cp.alpha + one - cp.gamma)
        / denom;
    Ok(Prop2Bound {
        c_min,
        delta_v: cp.v0 - cp.v1,
    })
}

/// True advantage `A` alongside the estimator `Â` formed from biased values:
/// `Â = r + γ·v_next_hat - v_hat`, while the biases shift it to
/// `A = Â + γ·delta_next - delta_now`.
pub fn biased_advantage<T: Scalar>(
    r: T,
    v_next_hat: T,
    v_hat: T,
    gamma: T,
    delta_next: T,
    delta_now: T,
) -> (T, T) {
    let a_hat = r + gamma * v_next_hat - v_hat;
    let a = r + gamma * (v_next_hat + delta_next) - (v_hat + delta_now);
    (a, a_hat)
}

/// Monte-Carlo estimate of the chain's stationary behaviour, produced by
/// actually running the scheduler implementation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSimulation<T> {
    pub steps: u64,
    pub p0_hat: T,
    pub p1_hat: T,
    /// Asymptotic standard error of `p1_hat`, corrected for the chain's
    /// autocorrelation (the naive binomial error underestimates badly for
    /// sticky chains): `sqrt(p1(1-p1)/steps · (1+λ)/(1-λ))` with `λ = m-n`.
    pub std_err: T,
    /// Histogram of maximal nominal run lengths (length → count).
    pub nominal_runs: BTreeMap<u64, u64>,
    pub adversarial_runs: BTreeMap<u64, u64>,
}

impl<T: Scalar> ChainSimulation<T> {
    fn mean_of(hist: &BTreeMap<u64, u64>) -> Option<T> {
        let count: u64 = hist.values().sum();
        if count == 0 {
            return None;
        }
        let total: u64 = hist.iter().map(|(len, c)| len * c).sum();
        Some(T::of(total as f64 / count as f64))
    }

    pub fn mean_nominal_run(&self) -> Option<T> {
        Self::mean_of(&self.nominal_runs)
    }

    pub fn mean_adversarial_run(&self) -> Option<T> {
        Self::mean_of(&self.adversarial_runs)
    }
}

/// Label for the simulator's random stream.
pub const CHAIN_SIM_LABEL: &str = "chain-sim";

/// Run the scheduler for `steps` transitions from the nominal state and
/// tally occupancy and run lengths.
pub fn simulate_chain<T: Scalar>(m: T, n: T, steps: u64, seed: u64) -> Result<ChainSimulation<T>> {
    if steps == 0 {
        return Err(Error::Contract("simulate_chain needs steps >= 1".into()));
    }
    let mut sched = ScheduleState::new(ScheduleMode::Markov { m, n })?;
    let mut rng = stream(seed, CHAIN_SIM_LABEL);
    let mut on_count: u64 = 0;
    let mut nominal_runs = BTreeMap::new();
    let mut adversarial_runs = BTreeMap::new();
    let mut run_flag = sched.attack_on;
    let mut run_len: u64 = 0;
    for _ in 0..steps {
        sched = advance_schedule(&sched, &mut rng);
        if sched.attack_on {
            on_count += 1;
        }
        if sched.attack_on == run_flag {
            run_len += 1;
        } else {
            if run_len > 0 {
                let hist = if run_flag { &mut adversarial_runs } else { &mut nominal_runs };
                *hist.entry(run_len).or_insert(0) += 1;
            }
            run_flag = sched.attack_on;
            run_len = 1;
        }
    }
    if run_len > 0 {
        let hist = if run_flag { &mut adversarial_runs } else { &mut nominal_runs };
        *hist.entry(run_len).or_insert(0) += 1;
    }
    let p1_hat = on_count as f64 / steps as f64;
    let (_, p1) = stationary(m.to_f64_lossy(), n.to_f64_lossy())?;
    let lambda = m.to_f64_lossy() - n.to_f64_lossy();
    let corr = if lambda < 1.0 { (1.0 + lambda) / (1.0 - lambda) } else { f64::INFINITY };
    let std_err = (p1 * (1.0 - p1) / steps as f64 * corr).sqrt();
    Ok(ChainSimulation {
        steps,
        p0_hat: T::of(1.0 - p1_hat),
        p1_hat: T::of(p1_hat),
        std_err: T::of(std_err),
        nominal_runs,
        adversarial_runs,
    })
}

/// Optional Monte-Carlo cross-check settings for [`analyze`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McCheck {
    pub steps: u64,
    pub seed: u64,
}

/// Everything [`analyze`] computes, with inputs echoed for self-describing
/// output rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport<T> {
    pub params: ChainParams<T>,
    pub a_hat: T,
    pub p0: T,
    pub p1: T,
    pub e_unc: T,
    pub e_con: T,
    pub delta_con: T,
    pub delta_unc: T,
    pub assumption_rarity: bool,
    pub assumption_value_order: bool,
    pub lemma1_holds: bool,
    pub lemma2_holds: bool,
    pub c_min: T,
    pub epsilon_tilde: T,
    pub mc_p0: Option<T>,
}

/// One-call evaluation of every closed form, plus the optional simulator
/// cross-check.
pub fn analyze<T: Scalar>(
    cp: &ChainParams<T>,
    a_hat: T,
    mc: Option<McCheck>,
) -> Result<AnalysisReport<T>> {
    cp.validate()?;
    let (p0, p1) = stationary(cp.m, cp.n)?;
    let (e_unc, e_con) = expected_values(cp)?;
    let (delta_con, delta_unc) = biases(cp)?;
    let bound = prop2_bound(cp)?;
    let eps = epsilon_tilde(cp.max_abs_adv, cp.gamma, cp.delta, a_hat);
    let mc_p0 = match mc {
        Some(c) => Some(simulate_chain(cp.m, cp.n, c.steps, c.seed)?.p0_hat),
        None => None,
    };
    Ok(AnalysisReport {
        params: *cp,
        a_hat,
        p0,
        p1,
        e_unc,
        e_con,
        delta_con,
        delta_unc,
        assumption_rarity: cp.rarity_assumption_holds(),
        assumption_value_order: cp.value_ordering_holds(),
        lemma1_holds: e_unc < e_con,
        lemma2_holds: delta_con < delta_unc,
        c_min: bound.c_min,
        epsilon_tilde: eps,
        mc_p0,
    })
}

impl<T: Scalar> AnalysisReport<T> {
    pub const CSV_HEADER: &'static str = "m,n,v0,v1,gamma,alpha,delta,max_abs_adv,a_hat,p0,p1,\
         e_unc,e_con,delta_con,delta_unc,assumption_rarity,assumption_value_order,lemma1,lemma2,\
         c_min,epsilon_tilde,mc_p0";

    pub fn csv_row(&self) -> String {
        let p = &self.params;
        let mc = self
            .mc_p0
            .map_or(String::new(), |v| format!("{}", v.to_f64_lossy()));
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            p.m.to_f64_lossy(),
            p.n.to_f64_lossy(),
            p.v0.to_f64_lossy(),
            p.v1.to_f64_lossy(),
            p.gamma.to_f64_lossy(),
            p.alpha.to_f64_lossy(),
            p.delta.to_f64_lossy(),
            p.max_abs_adv.to_f64_lossy(),
            self.a_hat.to_f64_lossy(),
            self.p0.to_f64_lossy(),
            self.p1.to_f64_lossy(),
            self.e_unc.to_f64_lossy(),
            self.e_con.to_f64_lossy(),
            self.delta_con.to_f64_lossy(),
            self.delta_unc.to_f64_lossy(),
            u8::from(self.assumption_rarity),
            u8::from(self.assumption_value_order),
            u8::from(self.lemma1_holds),
            u8::from(self.lemma2_holds),
            self.c_min.to_f64_lossy(),
            self.epsilon_tilde.to_f64_lossy(),
            mc,
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        let p = &self.params;
        json!({
            "m": p.m.to_f64_lossy(),
            "n": p.n.to_f64_lossy(),
            "v0": p.v0.to_f64_lossy(),
            "v1": p.v1.to_f64_lossy(),
            "gamma": p.gamma.to_f64_lossy(),
            "alpha": p.alpha.to_f64_lossy(),
            "delta": p.delta.to_f64_lossy(),
            "max_abs_adv": p.max_abs_adv.to_f64_lossy(),
            "a_hat": self.a_hat.to_f64_lossy(),
            "p0": self.p0.to_f64_lossy(),
            "p1": self.p1.to_f64_lossy(),
            "e_unc": self.e_unc.to_f64_lossy(),
            "e_con": self.e_con.to_f64_lossy(),
            "delta_con": self.delta_con.to_f64_lossy(),
            "delta_unc": self.delta_unc.to_f64_lossy(),
            "assumption_rarity": self.assumption_rarity,
            "assumption_value_order": self.assumption_value_order,
            "lemma1_holds": self.lemma1_holds,
            "lemma2_holds": self.lemma2_holds,
            "c_min": self.c_min.to_f64_lossy(),
            "epsilon_tilde": self.epsilon_tilde.to_f64_lossy(),
            "mc_p0": self.mc_p0.map(|v| v.to_f64_lossy()),
        })
    }
}
