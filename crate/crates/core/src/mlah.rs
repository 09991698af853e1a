//! The two-sub-policy hierarchy and its training loop.
//!
//! A master policy chooses at each step whether the nominal or the
//! adversarial sub-policy acts. The master never sees the environment state:
//! its entire observation is the advantage coordinate — the trailing window
//! of shared experience scored under each sub-policy's value function — plus
//! a constant bias input. An oracle master variant reads the true attack
//! flag instead (diagnostic upper bound), and a vanilla variant runs a single
//! policy with no hierarchy at all (baseline).
//!
//! Rollout and optimization are deliberately separate methods: everything a
//! learned agent trains on is inside the [`Trajectory`], and the recorded
//! true attack flags are read only by the oracle selection pathway during
//! rollout and by the reporting code afterwards. Tests rely on this barrier.
//!
//! Random streams are split per component (environment, attack, each
//! policy's sampling, each learner's minibatch shuffling, evaluation), so a
//! vanilla run and a hierarchy run with the same seed see bit-identical
//! environments, and a hierarchy that always selects the nominal sub-policy
//! reproduces the vanilla update sequence exactly.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::adversary::{advance_schedule, perturb, AttackSpec, ScheduleMode, ScheduleState};
use crate::approximator::{
    forward, log_softmax, mean_action, sample_categorical, sample_gaussian, HeadKind, OptState,
    ParamSet,
};
use crate::envs::{reset, step, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::ppo::{ppo_update, ActionBatch, PpoBatch, PpoConfig, PpoStats};
use crate::rlcore::{
    advantage_coordinate_from_values, gae, segments, AdvantageCoordinate, StepRecord, Trajectory,
    ADVERSARIAL, NOMINAL,
};
use crate::rng::{labels, stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MasterKind {
    /// Reads the ground-truth attack flag. Diagnostic upper bound.
    Oracle,
    /// Categorical policy over the advantage coordinate.
    Learned,
}

impl MasterKind {
    pub fn name(self) -> &'static str {
        match self {
            MasterKind::Oracle => "oracle",
            MasterKind::Learned => "learned",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "oracle" => Some(MasterKind::Oracle),
            "learned" => Some(MasterKind::Learned),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    /// Single unconditioned policy; the baseline.
    Vanilla,
    /// Master over two sub-policies.
    Mlah,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Vanilla => "vanilla",
            AgentKind::Mlah => "mlah",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "vanilla" => Some(AgentKind::Vanilla),
            "mlah" => Some(AgentKind::Mlah),
            _ => None,
        }
    }
}

/// All six networks plus the selection configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy<T> {
    pub policy_nom: ParamSet<T>,
    pub value_nom: ParamSet<T>,
    pub policy_adv: ParamSet<T>,
    pub value_adv: ParamSet<T>,
    pub policy_master: ParamSet<T>,
    pub value_master: ParamSet<T>,
    pub master_kind: MasterKind,
    /// Advantage-coordinate window length.
    pub h: usize,
    /// Master re-decides every this many steps (and at episode starts).
    pub decision_interval: usize,
}

/// The master's network input: both coordinates plus a constant bias.
pub const MASTER_INPUT_DIM: usize = 3;

/// Squash scale for the master's inputs. Advantage coordinates can reach
/// magnitudes far beyond the linear range of a tanh layer, which would
/// saturate the first hidden layer exactly on the most informative steps;
/// a fixed soft squash keeps every input in (-1, 1) without losing the
/// ordering of the coordinates.
pub const MASTER_INPUT_SQUASH: f64 = 10.0;

pub fn master_observation<T: Scalar>(coord: &AdvantageCoordinate<T>) -> Vec<T> {
    let squash = T::of(MASTER_INPUT_SQUASH);
    vec![(coord.a_nom / squash).tanh(), (coord.a_adv / squash).tanh(), T::one()]
}

impl<T: Scalar> Hierarchy<T> {
    /// Fresh networks: Gaussian sub-policies and a categorical master over
    /// two choices, each initialized from its own seed-derived stream so
    /// the two sub-policies start distinct.
    pub fn init(
        env: &EnvSpec<T>,
        master_kind: MasterKind,
        h: usize,
        decision_interval: usize,
        hidden_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if h == 0 || decision_interval == 0 || hidden_dim == 0 {
            return Err(Error::Contract(
                "h, decision_interval and hidden_dim must be >= 1".into(),
            ));
        }
        let obs = env.observation_dim();
        let act = env.action_dim();
        let policy_shape = [(obs, hidden_dim), (hidden_dim, hidden_dim), (hidden_dim, act)];
        let value_shape = [(obs, hidden_dim), (hidden_dim, hidden_dim), (hidden_dim, 1)];
        let master_shape = [
            (MASTER_INPUT_DIM, hidden_dim),
            (hidden_dim, hidden_dim),
            (hidden_dim, 2),
        ];
        let master_value_shape = [
            (MASTER_INPUT_DIM, hidden_dim),
            (hidden_dim, hidden_dim),
            (hidden_dim, 1),
        ];
        let mk = |shapes: &[(usize, usize)], head, scale, label| {
            ParamSet::init(shapes, head, scale, &mut stream(seed, label))
        };
        Ok(Self {
            policy_nom: mk(&policy_shape, HeadKind::Gaussian, 0.01, labels::INIT_POLICY_NOM)?,
            value_nom: mk(&value_shape, HeadKind::Scalar, 1.0, labels::INIT_VALUE_NOM)?,
            policy_adv: mk(&policy_shape, HeadKind::Gaussian, 0.01, labels::INIT_POLICY_ADV)?,
            value_adv: mk(&value_shape, HeadKind::Scalar, 1.0, labels::INIT_VALUE_ADV)?,
            policy_master: mk(&master_shape, HeadKind::Categorical, 0.01, labels::INIT_MASTER)?,
            value_master: mk(&master_value_shape, HeadKind::Scalar, 1.0, labels::INIT_VALUE_MASTER)?,
            master_kind,
            h,
            decision_interval,
        })
    }

    /// Pick the controlling sub-policy and the log-prob of that choice
    /// (zero for the oracle, which is not a distribution).
    pub fn select<R: Rng>(
        &self,
        coord: &AdvantageCoordinate<T>,
        true_flag: bool,
        rng: &mut R,
        deterministic: bool,
    ) -> Result<(u8, T)> {
        match self.master_kind {
            MasterKind::Oracle => Ok((u8::from(true_flag), T::zero())),
            MasterKind::Learned => {
                coord.validate()?;
                let obs = master_observation(coord);
                let (idx, lp) = sample_categorical(&self.policy_master, &obs, rng, deterministic)?;
                Ok((idx as u8, lp))
            }
        }
    }

    pub fn sub_policy(&self, controller: u8) -> (&ParamSet<T>, &ParamSet<T>) {
        if controller == NOMINAL {
            (&self.policy_nom, &self.value_nom)
        } else {
            (&self.policy_adv, &self.value_adv)
        }
    }
}

/// Everything needed to construct a reproducible run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings<T> {
    pub env: EnvSpec<T>,
    pub attack: AttackSpec<T>,
    pub schedule: ScheduleMode<T>,
    pub agent: AgentKind,
    pub master: MasterKind,
    pub h: usize,
    pub decision_interval: usize,
    pub hidden_dim: usize,
    pub eval_episodes: usize,
    pub ppo: PpoConfig<T>,
}

impl<T: Scalar> RunSettings<T> {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.attack.validate()?;
        self.ppo.validate()?;
        if self.eval_episodes == 0 {
            return Err(Error::Contract("eval_episodes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-iteration record: what happened during rollout, optimization and the
/// attack-free deterministic evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport<T> {
    pub iteration: usize,
    /// Mean return of episodes completed within this iteration's rollout.
    pub training_return: Option<T>,
    pub episodes_completed: usize,
    /// Mean return of attack-free deterministic evaluation episodes.
    pub eval_return: T,
    /// Fraction of rollout steps whose observation was attacked.
    pub attack_fraction: T,
    pub nom_steps: usize,
    pub adv_steps: usize,
    /// Fraction of rollout steps where the selected sub-policy matched the
    /// true attack flag. `None` for the vanilla agent.
    pub master_accuracy: Option<T>,
    pub stats_nom: PpoStats<T>,
    pub stats_adv: PpoStats<T>,
    pub stats_master: Option<PpoStats<T>>,
}

/// Optimization outcome of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome<T> {
    pub stats_nom: PpoStats<T>,
    pub stats_adv: PpoStats<T>,
    pub stats_master: Option<PpoStats<T>>,
    pub nom_steps: usize,
    pub adv_steps: usize,
}

/// One step of the trailing shared-experience window.
#[derive(Debug, Clone)]
struct WindowEntry<T> {
    state: Vec<T>,
    reward: T,
    done: bool,
    v_nom: T,
    v_adv: T,
}

/// A self-contained training run: environment, adversary, hierarchy,
/// optimizers and every random stream, advanced iteration by iteration.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub settings: RunSettings<T>,
    pub hierarchy: Hierarchy<T>,
    pub seed: u64,
    pub iteration: usize,

    env_state: EnvState<T>,
    schedule: ScheduleState<T>,
    /// Observation the agent will see next (already perturbed if the
    /// schedule is currently attacking) and whether it was attacked.
    pending_observed: Vec<T>,
    pending_flag: bool,
    window: VecDeque<WindowEntry<T>>,
    held_controller: u8,
    steps_since_decision: usize,
    need_decision: bool,
    /// Pretraining temporarily forces nominal control with attacks off.
    force_nominal: bool,
    episode_return: T,
    completed_returns: Vec<T>,

    rng_env: ChaCha8Rng,
    rng_attack: ChaCha8Rng,
    rng_policy_nom: ChaCha8Rng,
    rng_policy_adv: ChaCha8Rng,
    rng_master: ChaCha8Rng,
    rng_update_nom: ChaCha8Rng,
    rng_update_adv: ChaCha8Rng,
    rng_update_master: ChaCha8Rng,
    rng_eval: ChaCha8Rng,

    opt_policy_nom: OptState<T>,
    opt_value_nom: OptState<T>,
    opt_policy_adv: OptState<T>,
    opt_value_adv: OptState<T>,
    opt_policy_master: OptState<T>,
    opt_value_master: OptState<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(settings: RunSettings<T>, seed: u64) -> Result<Self> {
        settings.validate()?;
        let hierarchy = Hierarchy::init(
            &settings.env,
            settings.master,
            settings.h,
            settings.decision_interval,
            settings.hidden_dim,
            seed,
        )?;
        let mut rng_env = stream(seed, labels::ENV);
        let env_state = reset(&settings.env, &mut rng_env);
        let schedule = ScheduleState::new(settings.schedule)?;
        let pending_observed = env_state.observation.clone();
        let ppo = settings.ppo;
        let count_p = hierarchy.policy_nom.param_count();
        let count_v = hierarchy.value_nom.param_count();
        let count_mp = hierarchy.policy_master.param_count();
        let count_mv = hierarchy.value_master.param_count();
        Ok(Self {
            settings,
            hierarchy,
            seed,
            iteration: 0,
            env_state,
            schedule,
            pending_observed,
            pending_flag: false,
            window: VecDeque::new(),
            held_controller: NOMINAL,
            steps_since_decision: 0,
            need_decision: true,
            force_nominal: false,
            episode_return: T::zero(),
            completed_returns: Vec::new(),
            rng_env,
            rng_attack: stream(seed, labels::ATTACK),
            rng_policy_nom: stream(seed, labels::POLICY_NOM),
            rng_policy_adv: stream(seed, labels::POLICY_ADV),
            rng_master: stream(seed, labels::MASTER),
            rng_update_nom: stream(seed, labels::UPDATE_NOM),
            rng_update_adv: stream(seed, labels::UPDATE_ADV),
            rng_update_master: stream(seed, labels::UPDATE_MASTER),
            rng_eval: stream(seed, labels::EVAL_ENV),
            opt_policy_nom: OptState::new(count_p, ppo.lr_policy),
            opt_value_nom: OptState::new(count_v, ppo.lr_value),
            opt_policy_adv: OptState::new(count_p, ppo.lr_policy),
            opt_value_adv: OptState::new(count_v, ppo.lr_value),
            opt_policy_master: OptState::new(count_mp, ppo.lr_master),
            opt_value_master: OptState::new(count_mv, ppo.lr_value),
        })
    }

    fn value_of(net: &ParamSet<T>, obs: &[T]) -> Result<T> {
        Ok(forward(net, obs)?[0])
    }

    /// Advantage coordinate for the current step given bootstrap values of
    /// the pending observation. Empty window (run start) yields zeros.
    fn coordinate(&self, v_boot_nom: T, v_boot_adv: T) -> Result<AdvantageCoordinate<T>> {
        if self.window.is_empty() {
            return Ok(AdvantageCoordinate::zero());
        }
        let w = self.window.len();
        let mut rewards = Vec::with_capacity(w);
        let mut dones = Vec::with_capacity(w);
        let mut values_nom = Vec::with_capacity(w + 1);
        let mut values_adv = Vec::with_capacity(w + 1);
        for e in &self.window {
            rewards.push(e.reward);
            dones.push(e.done);
            values_nom.push(e.v_nom);
            values_adv.push(e.v_adv);
        }
        values_nom.push(v_boot_nom);
        values_adv.push(v_boot_adv);
        advantage_coordinate_from_values(
            &rewards,
            &dones,
            &values_nom,
            &values_adv,
            self.settings.ppo.gamma,
            self.settings.ppo.lambda,
        )
    }

    /// Re-evaluate the cached window values; called before each rollout so
    /// coordinates reflect the freshly updated value networks.
    pub fn refresh_window_values(&mut self) -> Result<()> {
        if self.settings.agent == AgentKind::Vanilla {
            return Ok(());
        }
        for i in 0..self.window.len() {
            let state = self.window[i].state.clone();
            self.window[i].v_nom = Self::value_of(&self.hierarchy.value_nom, &state)?;
            self.window[i].v_adv = Self::value_of(&self.hierarchy.value_adv, &state)?;
        }
        Ok(())
    }

    /// Collect `steps_per_iteration` transitions, continuing whatever
    /// episode was in flight. Episodes that end are reset inline; the attack
    /// schedule advances once per new observation.
    pub fn rollout(&mut self) -> Result<Trajectory<T>> {
        let t_total = self.settings.ppo.steps_per_iteration;
        let mut traj = Trajectory::with_capacity(t_total);
        let is_mlah = self.settings.agent == AgentKind::Mlah;

        for _ in 0..t_total {
            let obs = self.pending_observed.clone();
            let flag = self.pending_flag;

            let v_nom = Self::value_of(&self.hierarchy.value_nom, &obs)?;
            let (v_adv, coord) = if is_mlah {
                let v_a = Self::value_of(&self.hierarchy.value_adv, &obs)?;
                (v_a, self.coordinate(v_nom, v_a)?)
            } else {
                (T::zero(), AdvantageCoordinate::zero())
            };

            let (controller, master_lp) = if !is_mlah || self.force_nominal {
                (NOMINAL, T::zero())
            } else if self.need_decision || self.steps_since_decision >= self.hierarchy.decision_interval
            {
                let (c, lp) = self
                    .hierarchy
                    .select(&coord, flag, &mut self.rng_master, false)?;
                self.held_controller = c;
                self.steps_since_decision = 0;
                self.need_decision = false;
                (c, lp)
            } else {
                // held decision: record the log-prob the master currently
                // assigns to the held choice at this step's coordinate
                let c = self.held_controller;
                let lp = match self.hierarchy.master_kind {
                    MasterKind::Oracle => T::zero(),
                    MasterKind::Learned => {
                        let mobs = master_observation(&coord);
                        let logits = forward(&self.hierarchy.policy_master, &mobs)?;
                        log_softmax(&logits)[c as usize]
                    }
                };
                (c, lp)
            };

            let policy = if controller == NOMINAL {
                &self.hierarchy.policy_nom
            } else {
                &self.hierarchy.policy_adv
            };
            let rng_policy = if controller == NOMINAL {
                &mut self.rng_policy_nom
            } else {
                &mut self.rng_policy_adv
            };
            let (action, log_prob) = sample_gaussian(policy, &obs, rng_policy)?;

            let (next_state, reward, done) = step(&self.settings.env, &self.env_state, &action)?;

            traj.push(StepRecord {
                clean_state: self.env_state.observation.clone(),
                observed_state: obs.clone(),
                action,
                reward,
                log_prob,
                v_nom,
                v_adv,
                done,
                attack_flag: flag,
                controller,
                coord: coord.as_array(),
                master_log_prob: master_lp,
            });

            self.episode_return += reward;
            if done {
                self.completed_returns.push(self.episode_return);
                self.episode_return = T::zero();
            }

            if is_mlah {
                self.window.push_back(WindowEntry {
                    state: obs,
                    reward,
                    done,
                    v_nom,
                    v_adv,
                });
                while self.window.len() > self.hierarchy.h {
                    self.window.pop_front();
                }
            }

            self.steps_since_decision += 1;
            if done {
                self.need_decision = true;
                self.env_state = reset(&self.settings.env, &mut self.rng_env);
            } else {
                self.env_state = next_state;
            }

            self.schedule = advance_schedule(&self.schedule, &mut self.rng_attack);
            self.pending_flag = self.schedule.attack_on;
            self.pending_observed = if self.pending_flag {
                perturb(&self.env_state.observation, &self.settings.attack, &mut self.rng_attack)
            } else {
                self.env_state.observation.clone()
            };
        }

        traj.final_observed_state = self.pending_observed.clone();
        if is_mlah {
            traj.final_v_nom = Self::value_of(&self.hierarchy.value_nom, &traj.final_observed_state)?;
            traj.final_v_adv = Self::value_of(&self.hierarchy.value_adv, &traj.final_observed_state)?;
            traj.final_coord = self.coordinate(traj.final_v_nom, traj.final_v_adv)?.as_array();
        } else {
            traj.final_v_nom = Self::value_of(&self.hierarchy.value_nom, &traj.final_observed_state)?;
        }
        Ok(traj)
    }

    /// GAE advantages and value targets for the steps a given sub-policy
    /// controlled, computed segment by segment under that policy's own value
    /// estimates.
    fn sub_policy_batch(&self, traj: &Trajectory<T>, controller: u8) -> Result<PpoBatch<T>> {
        let ppo = &self.settings.ppo;
        let mut observations = Vec::new();
        let mut actions = Vec::new();
        let mut old_log_probs = Vec::new();
        let mut advantages = Vec::new();
        let mut returns = Vec::new();
        for (start, end, c) in segments(&traj.controllers) {
            if c != controller {
                continue;
            }
            // Continuation value past the segment. At trajectory truncation the
            // stored next-state value is the right bootstrap, and across an
            // episode boundary the recursion zeroes it anyway. At a mid-episode
            // hand-off the next observation belongs to the other regime, so the
            // last controlled step has no trustworthy continuation value: spend
            // it as the bootstrap anchor instead of training on it.
            let (train_end, boot) = if end == traj.len() {
                (end, traj.value_at(end, controller))
            } else if traj.dones[end - 1] {
                (end, T::zero())
            } else {
                (end - 1, traj.value_at(end - 1, controller))
            };
            if train_end == start {
                continue;
            }
            let rewards = &traj.rewards[start..train_end];
            let dones = &traj.dones[start..train_end];
            let mut values: Vec<T> =
                (start..train_end).map(|i| traj.value_at(i, controller)).collect();
            values.push(boot);
            let advs = gae(rewards, &values, dones, ppo.gamma, ppo.lambda)?;
            for (offset, adv) in advs.into_iter().enumerate() {
                let i = start + offset;
                observations.push(traj.observed_states[i].clone());
                actions.push(traj.actions[i].clone());
                old_log_probs.push(traj.log_probs[i]);
                returns.push(adv + values[offset]);
                advantages.push(adv);
            }
        }
        Ok(PpoBatch {
            observations,
            actions: ActionBatch::Continuous(actions),
            old_log_probs,
            advantages,
            returns,
        })
    }

    /// The master's batch: every step, observed as the advantage coordinate,
    /// with the selected controller as the action and the raw environment
    /// reward as the return signal.
    fn master_batch(&self, traj: &Trajectory<T>) -> Result<PpoBatch<T>> {
        let ppo = &self.settings.ppo;
        let t_len = traj.len();
        let mut observations = Vec::with_capacity(t_len);
        let mut values = Vec::with_capacity(t_len + 1);
        for i in 0..t_len {
            let mobs = master_observation(&AdvantageCoordinate {
                a_nom: traj.coords[i][0],
                a_adv: traj.coords[i][1],
            });
            values.push(Self::value_of(&self.hierarchy.value_master, &mobs)?);
            observations.push(mobs);
        }
        let final_mobs = master_observation(&AdvantageCoordinate {
            a_nom: traj.final_coord[0],
            a_adv: traj.final_coord[1],
        });
        values.push(Self::value_of(&self.hierarchy.value_master, &final_mobs)?);
        let advantages = gae(&traj.rewards, &values, &traj.dones, ppo.gamma_master, ppo.lambda)?;
        let returns: Vec<T> = advantages
            .iter()
            .zip(values.iter())
            .map(|(a, v)| *a + *v)
            .collect();
        Ok(PpoBatch {
            observations,
            actions: ActionBatch::Discrete(traj.controllers.iter().map(|&c| c as usize).collect()),
            old_log_probs: traj.master_log_probs.clone(),
            advantages,
            returns,
        })
    }

    /// Optimize from a collected trajectory: the nominal learner on its own
    /// segments, the adversarial learner on its own segments, then the
    /// learned master on all steps. Reads nothing from the trajectory's true
    /// attack flags.
    pub fn update_from_trajectory(&mut self, traj: &Trajectory<T>) -> Result<UpdateOutcome<T>> {
        traj.validate()?;
        let ppo = self.settings.ppo;
        match self.settings.agent {
            AgentKind::Vanilla => {
                let t_len = traj.len();
                let values: Vec<T> = (0..=t_len).map(|i| traj.value_at(i, NOMINAL)).collect();
                let advantages = gae(&traj.rewards, &values, &traj.dones, ppo.gamma, ppo.lambda)?;
                let returns: Vec<T> = advantages
                    .iter()
                    .zip(values.iter())
                    .map(|(a, v)| *a + *v)
                    .collect();
                let batch = PpoBatch {
                    observations: traj.observed_states.clone(),
                    actions: ActionBatch::Continuous(traj.actions.clone()),
                    old_log_probs: traj.log_probs.clone(),
                    advantages,
                    returns,
                };
                let stats_nom = ppo_update(
                    &mut self.hierarchy.policy_nom,
                    &mut self.hierarchy.value_nom,
                    &batch,
                    &ppo,
                    &mut self.opt_policy_nom,
                    &mut self.opt_value_nom,
                    &mut self.rng_update_nom,
                )?;
                Ok(UpdateOutcome {
                    stats_nom,
                    stats_adv: PpoStats::skipped(),
                    stats_master: None,
                    nom_steps: t_len,
                    adv_steps: 0,
                })
            }
            AgentKind::Mlah => {
                // build every batch before touching any parameters
                let batch_nom = self.sub_policy_batch(traj, NOMINAL)?;
                let batch_adv = self.sub_policy_batch(traj, ADVERSARIAL)?;
                let batch_master = match (self.hierarchy.master_kind, self.force_nominal) {
                    (MasterKind::Learned, false) => Some(self.master_batch(traj)?),
                    _ => None,
                };
                // Report attribution by controller; the update batches may be
                // smaller because mid-episode hand-off steps anchor bootstraps.
                let nom_steps = traj.controllers.iter().filter(|&&c| c == NOMINAL).count();
                let adv_steps = traj.len() - nom_steps;

                // Pretraining fine-tunes the nominal arm at full rate; in the
                // joint phase its step is scaled so mis-assigned segments
                // cannot quickly erode a pretrained anchor.
                let nom_scale = if self.force_nominal { T::one() } else { ppo.lr_nom_scale };
                self.opt_policy_nom.learning_rate = ppo.lr_policy * nom_scale;
                self.opt_value_nom.learning_rate = ppo.lr_value * nom_scale;

                let stats_nom = ppo_update(
                    &mut self.hierarchy.policy_nom,
                    &mut self.hierarchy.value_nom,
                    &batch_nom,
                    &ppo,
                    &mut self.opt_policy_nom,
                    &mut self.opt_value_nom,
                    &mut self.rng_update_nom,
                )?;
                let stats_adv = if self.force_nominal {
                    PpoStats::skipped()
                } else {
                    ppo_update(
                        &mut self.hierarchy.policy_adv,
                        &mut self.hierarchy.value_adv,
                        &batch_adv,
                        &ppo,
                        &mut self.opt_policy_adv,
                        &mut self.opt_value_adv,
                        &mut self.rng_update_adv,
                    )?
                };
                let stats_master = match batch_master {
                    Some(batch) => {
                        let mut master_cfg = ppo;
                        master_cfg.entropy_coef = ppo.entropy_coef_master;
                        Some(ppo_update(
                            &mut self.hierarchy.policy_master,
                            &mut self.hierarchy.value_master,
                            &batch,
                            &master_cfg,
                            &mut self.opt_policy_master,
                            &mut self.opt_value_master,
                            &mut self.rng_update_master,
                        )?)
                    }
                    None => None,
                };
                Ok(UpdateOutcome {
                    stats_nom,
                    stats_adv,
                    stats_master,
                    nom_steps,
                    adv_steps,
                })
            }
        }
    }

    /// Fraction of steps whose selected controller matches the true flag.
    /// This is reporting only — nothing trained reads it.
    pub fn selection_accuracy(traj: &Trajectory<T>) -> Option<T> {
        if traj.is_empty() {
            return None;
        }
        let hits = traj
            .controllers
            .iter()
            .zip(traj.attack_flags.iter())
            .filter(|(c, f)| **c == u8::from(**f))
            .count();
        Some(T::of(hits as f64 / traj.len() as f64))
    }

    /// Attack-free deterministic evaluation: mean undiscounted return over
    /// fresh episodes. Consumes only the dedicated evaluation stream, so
    /// training streams are untouched.
    pub fn evaluate(&mut self, episodes: usize) -> Result<T> {
        let learned = self.settings.agent == AgentKind::Mlah
            && self.hierarchy.master_kind == MasterKind::Learned;
        let mut total = T::zero();
        for _ in 0..episodes {
            let mut env_state = reset(&self.settings.env, &mut self.rng_eval);
            let mut window: VecDeque<(T, bool, T, T)> = VecDeque::new();
            loop {
                let obs = &env_state.observation;
                // with attacks off, the oracle master always picks nominal,
                // so only a learned master needs the coordinate machinery
                let controller = if !learned {
                    NOMINAL
                } else {
                    let v_n = Self::value_of(&self.hierarchy.value_nom, obs)?;
                    let v_a = Self::value_of(&self.hierarchy.value_adv, obs)?;
                    let coord = if window.is_empty() {
                        AdvantageCoordinate::zero()
                    } else {
                        let rewards: Vec<T> = window.iter().map(|e| e.0).collect();
                        let dones: Vec<bool> = window.iter().map(|e| e.1).collect();
                        let mut vn: Vec<T> = window.iter().map(|e| e.2).collect();
                        let mut va: Vec<T> = window.iter().map(|e| e.3).collect();
                        vn.push(v_n);
                        va.push(v_a);
                        advantage_coordinate_from_values(
                            &rewards,
                            &dones,
                            &vn,
                            &va,
                            self.settings.ppo.gamma,
                            self.settings.ppo.lambda,
                        )?
                    };
                    let mobs = master_observation(&coord);
                    let (idx, _) = sample_categorical(
                        &self.hierarchy.policy_master,
                        &mobs,
                        &mut self.rng_eval,
                        true,
                    )?;
                    window.push_back((T::zero(), false, v_n, v_a));
                    idx as u8
                };
                let (policy, _) = self.hierarchy.sub_policy(controller);
                let action = mean_action(policy, obs)?;
                let (next, reward, done) = step(&self.settings.env, &env_state, &action)?;
                total += reward;
                if learned {
                    // fill in the reward and termination for the step just taken
                    if let Some(last) = window.back_mut() {
                        last.0 = reward;
                        last.1 = done;
                    }
                    while window.len() > self.hierarchy.h {
                        window.pop_front();
                    }
                }
                if done {
                    break;
                }
                env_state = next;
            }
        }
        Ok(total / T::of(episodes as f64))
    }

    /// One training iteration: refresh window values, roll out, optimize,
    /// then run the attack-free evaluation and assemble the report.
    pub fn train_iteration(&mut self) -> Result<IterationReport<T>> {
        Ok(self.train_iteration_traj()?.0)
    }

    /// As [`Self::train_iteration`], also handing back the rollout so
    /// callers can log per-step selection data.
    pub fn train_iteration_traj(&mut self) -> Result<(IterationReport<T>, Trajectory<T>)> {
        self.refresh_window_values()?;
        let traj = self.rollout()?;
        let outcome = self.update_from_trajectory(&traj)?;
        let eval_return = self.evaluate(self.settings.eval_episodes)?;
        let completed = std::mem::take(&mut self.completed_returns);
        let training_return = if completed.is_empty() {
            None
        } else {
            Some(completed.iter().copied().sum::<T>() / T::of(completed.len() as f64))
        };
        let master_accuracy = if self.settings.agent == AgentKind::Mlah {
            Self::selection_accuracy(&traj)
        } else {
            None
        };
        let attacked = traj.attack_flags.iter().filter(|&&f| f).count();
        let report = IterationReport {
            iteration: self.iteration,
            training_return,
            episodes_completed: completed.len(),
            eval_return,
            attack_fraction: T::of(attacked as f64 / traj.len().max(1) as f64),
            nom_steps: outcome.nom_steps,
            adv_steps: outcome.adv_steps,
            master_accuracy,
            stats_nom: outcome.stats_nom,
            stats_adv: outcome.stats_adv,
            stats_master: outcome.stats_master,
        };
        self.iteration += 1;
        Ok((report, traj))
    }

    /// Train only the nominal sub-policy with the adversary disabled; the
    /// adversarial policy and the master are untouched. The attack schedule
    /// and its stream are suspended, not consumed.
    pub fn pretrain_nominal(&mut self, iterations: usize) -> Result<Vec<IterationReport<T>>> {
        let saved_schedule = self.schedule;
        let saved_mode = self.settings.schedule;
        let saved_attack = self.settings.attack;
        self.schedule = ScheduleState::new(ScheduleMode::Off)?;
        self.settings.schedule = ScheduleMode::Off;
        self.settings.attack = AttackSpec::disabled();
        self.force_nominal = true;
        // the pending observation may have been perturbed; replace it with
        // the clean state so pretraining is genuinely attack-free
        self.pending_observed = self.env_state.observation.clone();
        self.pending_flag = false;
        let mut reports = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            reports.push(self.train_iteration()?);
        }
        self.force_nominal = false;
        self.schedule = saved_schedule;
        self.settings.schedule = saved_mode;
        self.settings.attack = saved_attack;
        Ok(reports)
    }

    /// Word positions of every stream, for checkpointing.
    pub fn rng_positions(&self) -> Vec<(&'static str, u128)> {
        vec![
            (labels::ENV, self.rng_env.get_word_pos()),
            (labels::ATTACK, self.rng_attack.get_word_pos()),
            (labels::POLICY_NOM, self.rng_policy_nom.get_word_pos()),
            (labels::POLICY_ADV, self.rng_policy_adv.get_word_pos()),
            (labels::MASTER, self.rng_master.get_word_pos()),
            (labels::UPDATE_NOM, self.rng_update_nom.get_word_pos()),
            (labels::UPDATE_ADV, self.rng_update_adv.get_word_pos()),
            (labels::UPDATE_MASTER, self.rng_update_master.get_word_pos()),
            (labels::EVAL_ENV, self.rng_eval.get_word_pos()),
        ]
    }

    /// Restore stream positions saved by [`Self::rng_positions`].
    pub fn set_rng_positions(&mut self, positions: &[(String, u128)]) -> Result<()> {
        for (label, pos) in positions {
            let rng = match label.as_str() {
                labels::ENV => &mut self.rng_env,
                labels::ATTACK => &mut self.rng_attack,
                labels::POLICY_NOM => &mut self.rng_policy_nom,
                labels::POLICY_ADV => &mut self.rng_policy_adv,
                labels::MASTER => &mut self.rng_master,
                labels::UPDATE_NOM => &mut self.rng_update_nom,
                labels::UPDATE_ADV => &mut self.rng_update_adv,
                labels::UPDATE_MASTER => &mut self.rng_update_master,
                labels::EVAL_ENV => &mut self.rng_eval,
                other => {
                    return Err(Error::Checkpoint(format!("unknown rng stream {other}")));
                }
            };
            rng.set_word_pos(*pos);
        }
        Ok(())
    }
}
