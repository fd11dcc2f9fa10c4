//! Epoch-based training loop.
//!
//! Each epoch rolls a fixed number of episodes with the current
//! exploration rate, then regresses TD targets on minibatches drawn
//! without replacement from exactly that epoch's transitions, and finally
//! re-clones the target networks. In the communication modes the predator
//! update recomputes messages from the stored teammate observations, so the
//! receiving agent's loss reaches back through the message into the
//! sender's network. The prey update reads messages (when visible) as
//! plain observation entries; nothing the prey do can touch a predator
//! parameter.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{
    select_action, ANet, CNet, EpsilonSchedule, IqlNet, PolicySet, PredatorPolicy, MESSAGE_SLOT,
};
use crate::diffnet::{adam_step, AdamState, GradientSet};
use crate::env::{
    self, observe, Action, EnvConfig, Mode, TrajectoryRow, WorldState, AGENT_COUNT, PREDATORS,
    PREY,
};
use crate::{Error, Result};

/// Learning hyperparameters; the defaults are the experiment's reference
/// values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub episodes_per_epoch: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Epochs over which epsilon anneals linearly; `None` means the first
    /// 20% of the run.
    pub eps_anneal_epochs: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            gamma: 0.97,
            learning_rate: 0.0005,
            epochs: 2000,
            batch_size: 200,
            episodes_per_epoch: 50,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_epochs: None,
        }
    }
}

impl TrainingConfig {
    pub fn with_epochs(epochs: usize) -> TrainingConfig {
        TrainingConfig {
            epochs,
            ..TrainingConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must be in [0, 1]".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.episodes_per_epoch == 0 {
            return Err(Error::Config(
                "batch_size and episodes_per_epoch must be >= 1".into(),
            ));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<EpsilonSchedule> {
        let anneal = self
            .eps_anneal_epochs
            .unwrap_or_else(|| (self.epochs as f64 * 0.2).ceil() as usize);
        EpsilonSchedule::new(self.eps_start, self.eps_end, anneal)
    }
}

/// One timestep's joint record. Teammate observations are stored so the
/// update can *recompute* messages; replaying raw message values would
/// sever the gradient path into the sender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs_t: [Vec<f64>; AGENT_COUNT],
    /// Messages emitted at `t` (communication modes only); kept for
    /// inspection, never replayed by the updates.
    pub messages_t: Option<[f64; 2]>,
    pub actions: [Action; AGENT_COUNT],
    pub predator_reward: f64,
    pub prey_reward: f64,
    pub obs_next: [Vec<f64>; AGENT_COUNT],
    pub done: bool,
    pub epoch: usize,
}

/// Post-step snapshot kept alongside transitions for trajectory export.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub state: WorldState,
    pub actions: [Action; AGENT_COUNT],
    pub predator_reward: f64,
    pub prey_reward: f64,
}

/// Everything one episode produced.
#[derive(Debug, Clone)]
pub struct EpisodeRollout {
    pub transitions: Vec<Transition>,
    pub frames: Vec<Frame>,
    pub predator_return: f64,
    pub prey_return: f64,
    /// The episode's secret assignments, constant from reset to done.
    pub targets: [usize; 2],
}

/// Borrowed view of the online policies, for rollouts.
#[derive(Clone, Copy)]
pub enum PredatorPolicyView<'a> {
    Comm { cnet: &'a CNet, anet: &'a ANet },
    Iql(&'a IqlNet),
}

#[derive(Clone, Copy)]
pub struct PolicyView<'a> {
    pub predators: PredatorPolicyView<'a>,
    pub prey: &'a IqlNet,
}

impl PolicySet {
    pub fn view(&self) -> PolicyView<'_> {
        PolicyView {
            predators: match &self.predators {
                PredatorPolicy::Comm { cnet, anet } => PredatorPolicyView::Comm { cnet, anet },
                PredatorPolicy::Iql(net) => PredatorPolicyView::Iql(net),
            },
            prey: &self.prey,
        }
    }
}

/// One-step TD regression target.
pub fn td_target(reward: f64, done: bool, next_q_max: f64, gamma: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * next_q_max
    }
}

fn q_max(q: &[f64]) -> f64 {
    q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// All four observations for `state`, plus this step's messages. Both
/// predators emit from their *current* observations; each consumes the
/// teammate's message the same step, and under public communication the
/// prey hear both.
type JointObservations = ([Vec<f64>; AGENT_COUNT], Option<[f64; 2]>);

fn joint_observe(
    state: &WorldState,
    config: &EnvConfig,
    policies: &PolicyView<'_>,
) -> Result<JointObservations> {
    let pred0 = observe(state, PREDATORS[0], config, None)?;
    let pred1 = observe(state, PREDATORS[1], config, None)?;
    let messages = match &policies.predators {
        PredatorPolicyView::Comm { cnet, .. } => Some([
            cnet.compute_message(&pred0)?,
            cnet.compute_message(&pred1)?,
        ]),
        PredatorPolicyView::Iql(_) => None,
    };
    let heard = if config.mode == Mode::PublicComm {
        messages
    } else {
        None
    };
    let prey0 = observe(state, PREY[0], config, heard)?;
    let prey1 = observe(state, PREY[1], config, heard)?;
    Ok(([pred0, pred1, prey0, prey1], messages))
}

fn check_policies_match(policies: &PolicyView<'_>, config: &EnvConfig) -> Result<()> {
    let comm_policy = matches!(policies.predators, PredatorPolicyView::Comm { .. });
    if comm_policy != config.mode.is_comm() {
        return Err(Error::InvalidCall(format!(
            "predator policy kind does not match mode {}",
            config.mode
        )));
    }
    let want = env::observation_len(config.mode, PREY[0]);
    if policies.prey.obs_len() != want {
        return Err(Error::InvalidCall(format!(
            "prey net expects {}-wide observations, mode {} provides {}",
            policies.prey.obs_len(),
            config.mode,
            want
        )));
    }
    Ok(())
}

/// Rolls one full episode with epsilon-greedy actions.
pub fn rollout_episode<R: Rng + ?Sized>(
    policies: PolicyView<'_>,
    config: &EnvConfig,
    epsilon: f64,
    epoch: usize,
    rng: &mut R,
) -> Result<EpisodeRollout> {
    check_policies_match(&policies, config)?;
    let mut state = env::reset(config, rng);
    let targets = state.targets;
    let mut transitions = Vec::with_capacity(config.episode_length as usize);
    let mut frames = Vec::with_capacity(config.episode_length as usize);
    let mut predator_return = 0.0;
    let mut prey_return = 0.0;

    let (mut obs, mut messages) = joint_observe(&state, config, &policies)?;
    loop {
        let mut actions = [Action::NoOp; AGENT_COUNT];
        for agent in 0..AGENT_COUNT {
            let q = match (&policies.predators, env::is_predator(agent)) {
                (PredatorPolicyView::Comm { anet, .. }, true) => {
                    let mate_message = messages.expect("comm mode has messages")
                        [env::teammate(agent)];
                    anet.compute_q(&obs[agent], mate_message)?
                }
                (PredatorPolicyView::Iql(net), true) => net.compute_q(&obs[agent])?,
                (_, false) => policies.prey.compute_q(&obs[agent])?,
            };
            actions[agent] = select_action(&q, epsilon, rng)?;
        }

        let step = env::step(&state, &actions, config)?;
        let (next_obs, next_messages) = joint_observe(&step.next_state, config, &policies)?;
        predator_return += step.predator_reward;
        prey_return += step.prey_reward;
        transitions.push(Transition {
            obs_t: obs,
            messages_t: messages,
            actions,
            predator_reward: step.predator_reward,
            prey_reward: step.prey_reward,
            obs_next: next_obs.clone(),
            done: step.done,
            epoch,
        });
        frames.push(Frame {
            state: step.next_state.clone(),
            actions,
            predator_reward: step.predator_reward,
            prey_reward: step.prey_reward,
        });
        state = step.next_state;
        obs = next_obs;
        messages = next_messages;
        if step.done {
            break;
        }
    }

    Ok(EpisodeRollout {
        transitions,
        frames,
        predator_return,
        prey_return,
        targets,
    })
}

/// Greedy evaluation episodes flattened to trajectory rows.
pub fn record_greedy_trajectories(
    policies: &PolicySet,
    config: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<TrajectoryRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for episode in 0..episodes {
        let rollout = rollout_episode(policies.view(), config, 0.0, 0, &mut rng)?;
        for frame in &rollout.frames {
            for agent in 0..AGENT_COUNT {
                rows.push(TrajectoryRow {
                    episode,
                    step: frame.state.step,
                    agent,
                    px: frame.state.positions[agent][0],
                    py: frame.state.positions[agent][1],
                    vx: frame.state.velocities[agent][0],
                    vy: frame.state.velocities[agent][1],
                    action: frame.actions[agent].index(),
                    reward: if env::is_predator(agent) {
                        frame.predator_reward
                    } else {
                        frame.prey_reward
                    },
                    target: if env::is_predator(agent) {
                        Some(frame.state.targets[agent])
                    } else {
                        None
                    },
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum PredatorLearner {
    Dial {
        cnet: CNet,
        anet: ANet,
        cnet_target: CNet,
        anet_target: ANet,
        cnet_opt: AdamState,
        anet_opt: AdamState,
    },
    Iql {
        net: IqlNet,
        target: IqlNet,
        opt: AdamState,
    },
}

/// Which team an independent-Q update trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Team {
    Predators,
    Prey,
}

/// Online networks, their per-epoch target clones, optimizer moments, and
/// the run's seed-stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerState {
    config: TrainingConfig,
    env: EnvConfig,
    predators: PredatorLearner,
    prey: IqlNet,
    prey_target: IqlNet,
    prey_opt: AdamState,
    pub epoch: usize,
    schedule: EpsilonSchedule,
    #[serde(skip)]
    store: Vec<Transition>,
    rng: ChaCha8Rng,
}

/// Per-epoch log record, one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_predator_reward: f64,
    pub mean_prey_reward: f64,
    pub epsilon: f64,
    pub dial_loss: Option<f64>,
    pub iql_loss_prey: f64,
    pub iql_loss_pred: Option<f64>,
}

pub type RunLog = Vec<EpochRecord>;

/// What [`TrainerState::train_epoch`] did, beyond the log record.
#[derive(Debug, Clone)]
pub struct EpochOutcome {
    pub record: EpochRecord,
    pub transitions_gathered: usize,
    pub batch_sizes: Vec<usize>,
}

/// Finite-difference report for the loss-to-sender gradient path.
#[derive(Debug, Clone)]
pub struct ChannelGradReport {
    pub max_rel_error: f64,
    pub components_checked: usize,
}

impl TrainerState {
    pub fn new(config: TrainingConfig, env: EnvConfig, seed: u64) -> Result<TrainerState> {
        config.validate()?;
        env.validate()?;
        let schedule = config.schedule()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lr = config.learning_rate;
        let policies = PolicySet::init(env.mode, &mut rng);
        let predators = match policies.predators {
            PredatorPolicy::Comm { cnet, anet } => PredatorLearner::Dial {
                cnet_target: cnet.clone(),
                anet_target: anet.clone(),
                cnet_opt: AdamState::new(cnet.dense(), lr),
                anet_opt: AdamState::new(anet.dense(), lr),
                cnet,
                anet,
            },
            PredatorPolicy::Iql(net) => PredatorLearner::Iql {
                target: net.clone(),
                opt: AdamState::new(net.dense(), lr),
                net,
            },
        };
        let prey = policies.prey;
        Ok(TrainerState {
            prey_target: prey.clone(),
            prey_opt: AdamState::new(prey.dense(), lr),
            config,
            env,
            predators,
            prey,
            epoch: 0,
            schedule,
            store: Vec::new(),
            rng,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn env_config(&self) -> &EnvConfig {
        &self.env
    }

    /// Exploration rate for the current epoch.
    pub fn epsilon(&self) -> f64 {
        self.schedule.value(self.epoch)
    }

    /// Snapshot of the online networks.
    pub fn policies(&self) -> PolicySet {
        let predators = match &self.predators {
            PredatorLearner::Dial { cnet, anet, .. } => PredatorPolicy::Comm {
                cnet: cnet.clone(),
                anet: anet.clone(),
            },
            PredatorLearner::Iql { net, .. } => PredatorPolicy::Iql(net.clone()),
        };
        PolicySet {
            predators,
            prey: self.prey.clone(),
        }
    }

    /// Rolls one episode at the current epoch's epsilon using the online
    /// networks and the trainer's seed-stream.
    pub fn run_episode(&mut self) -> Result<EpisodeRollout> {
        let epsilon = self.schedule.value(self.epoch);
        let TrainerState {
            predators,
            prey,
            rng,
            env,
            epoch,
            ..
        } = self;
        let view = PolicyView {
            predators: match predators {
                PredatorLearner::Dial { cnet, anet, .. } => {
                    PredatorPolicyView::Comm { cnet, anet }
                }
                PredatorLearner::Iql { net, .. } => PredatorPolicyView::Iql(net),
            },
            prey,
        };
        rollout_episode(view, env, epsilon, *epoch, rng)
    }

    /// TD update for the communicating predators; the gradient flows
    /// through each recomputed message into the sender's net. Returns the
    /// batch's mean squared TD error.
    pub fn dial_update(&mut self, batch: &[Transition]) -> Result<f64> {
        let gamma = self.config.gamma;
        let epoch = self.epoch;
        match &mut self.predators {
            PredatorLearner::Iql { .. } => Err(Error::InvalidCall(
                "communication update called without a communication policy".into(),
            )),
            PredatorLearner::Dial {
                cnet,
                anet,
                cnet_target,
                anet_target,
                cnet_opt,
                anet_opt,
            } => {
                let mut anet_grads = GradientSet::zeros(anet.dense());
                let mut cnet_grads = GradientSet::zeros(cnet.dense());
                let loss = dial_loss(
                    cnet,
                    anet,
                    cnet_target,
                    anet_target,
                    gamma,
                    batch,
                    Some((&mut cnet_grads, &mut anet_grads)),
                )?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "communication TD loss at epoch {epoch}"
                    )));
                }
                adam_step(anet.dense_mut(), &anet_grads, anet_opt)?;
                adam_step(cnet.dense_mut(), &cnet_grads, cnet_opt)?;
                Ok(loss)
            }
        }
    }

    /// Independent-Q TD update for one team with its shared network. Prey
    /// read any message entries in their observations as fixed inputs, so
    /// no gradient can cross the team boundary.
    pub fn iql_update(&mut self, batch: &[Transition], team: Team) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidCall("empty batch".into()));
        }
        let gamma = self.config.gamma;
        let epoch = self.epoch;
        let (net, target, opt, members) = match team {
            Team::Predators => match &mut self.predators {
                PredatorLearner::Dial { .. } => {
                    return Err(Error::InvalidCall(
                        "predators learn through the communication update in this mode".into(),
                    ))
                }
                PredatorLearner::Iql { net, target, opt } => (net, &*target, opt, PREDATORS),
            },
            Team::Prey => (
                &mut self.prey,
                &self.prey_target,
                &mut self.prey_opt,
                PREY,
            ),
        };

        let mut grads = GradientSet::zeros(net.dense());
        let n = (batch.len() * members.len()) as f64;
        let mut sse = 0.0;
        for tr in batch {
            let reward = match team {
                Team::Predators => tr.predator_reward,
                Team::Prey => tr.prey_reward,
            };
            for &agent in &members {
                let trace = net.q_trace(&tr.obs_t[agent])?;
                let action = tr.actions[agent].index();
                let next_max = q_max(&target.compute_q(&tr.obs_next[agent])?);
                let y = td_target(reward, tr.done, next_max, gamma);
                let delta = trace.output()[action] - y;
                sse += delta * delta;
                let mut dq = [0.0; Action::COUNT];
                dq[action] = 2.0 * delta / n;
                net.dense().backward_into(&trace, &dq, &mut grads)?;
            }
        }
        let loss = sse / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "independent-Q TD loss at epoch {epoch}"
            )));
        }
        adam_step(net.dense_mut(), &grads, opt)?;
        Ok(loss)
    }

    /// Re-clones every target network from its online twin.
    pub fn sync_targets(&mut self) {
        match &mut self.predators {
            PredatorLearner::Dial {
                cnet,
                anet,
                cnet_target,
                anet_target,
                ..
            } => {
                *cnet_target = cnet.clone();
                *anet_target = anet.clone();
            }
            PredatorLearner::Iql { net, target, .. } => *target = net.clone(),
        }
        self.prey_target = self.prey.clone();
    }

    /// Compares the analytic gradient of the communication batch loss with
    /// central finite differences, for every message-net parameter.
    pub fn channel_gradient_report(
        &self,
        batch: &[Transition],
        h: f64,
    ) -> Result<ChannelGradReport> {
        let gamma = self.config.gamma;
        let PredatorLearner::Dial {
            cnet,
            anet,
            cnet_target,
            anet_target,
            ..
        } = &self.predators
        else {
            return Err(Error::InvalidCall(
                "channel check requires a communication policy".into(),
            ));
        };
        let mut cnet_grads = GradientSet::zeros(cnet.dense());
        let mut anet_grads = GradientSet::zeros(anet.dense());
        dial_loss(
            cnet,
            anet,
            cnet_target,
            anet_target,
            gamma,
            batch,
            Some((&mut cnet_grads, &mut anet_grads)),
        )?;

        let mut max_rel = 0.0f64;
        let mut checked = 0usize;
        let in_dim = cnet.dense().layers()[0].in_dim();
        for i in 0..=in_dim {
            let mut probe = cnet.clone();
            let analytic = if i == in_dim {
                cnet_grads.bias_grads(0)[0]
            } else {
                cnet_grads.weight_grads(0)[i]
            };
            let slot = |c: &mut CNet, v: f64| {
                if i == in_dim {
                    c.dense_mut().layers_mut()[0].bias_mut()[0] = v;
                } else {
                    c.dense_mut().layers_mut()[0].weights_mut()[i] = v;
                }
            };
            let orig = if i == in_dim {
                cnet.dense().layers()[0].bias()[0]
            } else {
                cnet.dense().layers()[0].weights()[i]
            };
            slot(&mut probe, orig + h);
            let plus = dial_loss(&probe, anet, cnet_target, anet_target, gamma, batch, None)?;
            slot(&mut probe, orig - h);
            let minus = dial_loss(&probe, anet, cnet_target, anet_target, gamma, batch, None)?;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-4);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
        Ok(ChannelGradReport {
            max_rel_error: max_rel,
            components_checked: checked,
        })
    }

    /// One complete epoch: collect episodes, update on shuffled
    /// minibatches, sync targets, advance the epoch counter.
    pub fn train_epoch(&mut self) -> Result<EpochOutcome> {
        let epsilon = self.schedule.value(self.epoch);
        let episodes = self.config.episodes_per_epoch;
        self.store.clear();
        let mut pred_sum = 0.0;
        let mut prey_sum = 0.0;
        for _ in 0..episodes {
            let rollout = self.run_episode()?;
            pred_sum += rollout.predator_return;
            prey_sum += rollout.prey_return;
            self.store.extend(rollout.transitions);
        }
        let mean_predator_reward = pred_sum / episodes as f64;
        let mean_prey_reward = prey_sum / episodes as f64;
        if !mean_predator_reward.is_finite() {
            return Err(Error::NonFinite(format!(
                "mean episode reward at epoch {}",
                self.epoch
            )));
        }

        let mut store = std::mem::take(&mut self.store);
        let transitions_gathered = store.len();
        store.shuffle(&mut self.rng);

        let comm = matches!(self.predators, PredatorLearner::Dial { .. });
        let mut batch_sizes = Vec::new();
        let mut dial_sse = 0.0;
        let mut pred_sse = 0.0;
        let mut prey_sse = 0.0;
        let mut samples = 0.0;
        for chunk in store.chunks(self.config.batch_size) {
            batch_sizes.push(chunk.len());
            let weight = (chunk.len() * 2) as f64;
            if comm {
                dial_sse += self.dial_update(chunk)? * weight;
            } else {
                pred_sse += self.iql_update(chunk, Team::Predators)? * weight;
            }
            prey_sse += self.iql_update(chunk, Team::Prey)? * weight;
            samples += weight;
        }
        self.store = store;
        self.sync_targets();

        let record = EpochRecord {
            epoch: self.epoch,
            mean_predator_reward,
            mean_prey_reward,
            epsilon,
            dial_loss: comm.then_some(dial_sse / samples),
            iql_loss_prey: prey_sse / samples,
            iql_loss_pred: (!comm).then_some(pred_sse / samples),
        };
        self.epoch += 1;
        Ok(EpochOutcome {
            record,
            transitions_gathered,
            batch_sizes,
        })
    }

    #[cfg(test)]
    pub(crate) fn comm_nets_mut(&mut self) -> Option<(&mut CNet, &mut ANet)> {
        match &mut self.predators {
            PredatorLearner::Dial { cnet, anet, .. } => Some((cnet, anet)),
            PredatorLearner::Iql { .. } => None,
        }
    }

    #[cfg(test)]
    pub(crate) fn target_policies(&self) -> PolicySet {
        let predators = match &self.predators {
            PredatorLearner::Dial {
                cnet_target,
                anet_target,
                ..
            } => PredatorPolicy::Comm {
                cnet: cnet_target.clone(),
                anet: anet_target.clone(),
            },
            PredatorLearner::Iql { target, .. } => PredatorPolicy::Iql(target.clone()),
        };
        PolicySet {
            predators,
            prey: self.prey_target.clone(),
        }
    }
}

/// Batch loss of the communicating predators; when `grads` is given, also
/// accumulates the parameter gradients of the message net and action net.
///
/// For each transition and each predator the teammate's message is
/// recomputed from the stored observation with the *online* message net;
/// the bootstrap value comes from the target nets and is treated as a
/// constant.
fn dial_loss(
    cnet: &CNet,
    anet: &ANet,
    cnet_target: &CNet,
    anet_target: &ANet,
    gamma: f64,
    batch: &[Transition],
    grads: Option<(&mut GradientSet, &mut GradientSet)>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidCall("empty batch".into()));
    }
    let n = (batch.len() * 2) as f64;
    let mut sse = 0.0;
    let mut grads = grads;
    for tr in batch {
        for pred in PREDATORS {
            let mate = env::teammate(pred);
            let message_trace = cnet.message_trace(&tr.obs_t[mate])?;
            let message = message_trace.output()[0];
            let q_trace = anet.q_trace(&tr.obs_t[pred], message)?;
            let action = tr.actions[pred].index();

            let next_message = cnet_target.compute_message(&tr.obs_next[mate])?;
            let next_q = anet_target.compute_q(&tr.obs_next[pred], next_message)?;
            let y = td_target(tr.predator_reward, tr.done, q_max(&next_q), gamma);

            let delta = q_trace.output()[action] - y;
            sse += delta * delta;

            if let Some((cnet_grads, anet_grads)) = grads.as_mut() {
                let mut dq = [0.0; Action::COUNT];
                dq[action] = 2.0 * delta / n;
                let input_grad = anet.dense().backward_into(&q_trace, &dq, anet_grads)?;
                // The message slot's gradient is the piece that crosses the
                // channel back into the sender.
                let channel = input_grad[MESSAGE_SLOT];
                cnet.dense()
                    .backward_into(&message_trace, &[channel], cnet_grads)?;
            }
        }
    }
    Ok(sse / n)
}

/// A finished run: the per-epoch log and the final online networks.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub policies: PolicySet,
}

/// Runs `config.epochs` training epochs from a fresh seed.
pub fn train_run(config: &TrainingConfig, env: &EnvConfig, seed: u64) -> Result<TrainOutcome> {
    train_run_resumable(config, env, seed, None, 0)
}

/// Like [`train_run`], but can periodically checkpoint the full trainer to
/// `resume_path` (every `resume_every` epochs) and continue from such a
/// file if it already exists. A resumed run reproduces the uninterrupted
/// run bit for bit.
pub fn train_run_resumable(
    config: &TrainingConfig,
    env: &EnvConfig,
    seed: u64,
    resume_path: Option<&Path>,
    resume_every: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    env.validate()?;
    let (mut trainer, mut log) = match resume_path {
        Some(path) if path.exists() => {
            let resume = read_resume(path)?;
            resume.matches(config, env, seed)?;
            (resume.trainer, resume.log)
        }
        _ => (TrainerState::new(config.clone(), env.clone(), seed)?, Vec::new()),
    };
    while trainer.epoch < config.epochs {
        let outcome = trainer.train_epoch()?;
        log.push(outcome.record);
        if let Some(path) = resume_path {
            if resume_every > 0 && trainer.epoch % resume_every == 0 {
                write_resume(path, &trainer, &log, seed)?;
            }
        }
    }
    if let Some(path) = resume_path {
        if resume_every > 0 {
            write_resume(path, &trainer, &log, seed)?;
        }
    }
    let policies = trainer.policies();
    Ok(TrainOutcome { log, policies })
}

/// On-disk snapshot of an interrupted run: trainer (networks, optimizer
/// moments, epoch counter, seed-stream position) plus the log so far.
#[derive(Serialize, Deserialize)]
struct ResumeFile {
    seed: u64,
    trainer: TrainerState,
    log: RunLog,
}

impl ResumeFile {
    fn matches(&self, config: &TrainingConfig, env: &EnvConfig, seed: u64) -> Result<()> {
        // The horizon may be extended when continuing; everything else must
        // be the run that wrote the file. The epsilon anneal window stays
        // whatever the original trainer computed.
        let mut stored = self.trainer.config.clone();
        stored.epochs = config.epochs;
        if self.seed != seed || &stored != config || &self.trainer.env != env {
            return Err(Error::InvalidCall(
                "resume file was written by a different configuration or seed".into(),
            ));
        }
        if self.trainer.epoch > config.epochs {
            return Err(Error::InvalidCall(format!(
                "resume file is already at epoch {}, beyond the requested {}",
                self.trainer.epoch, config.epochs
            )));
        }
        Ok(())
    }
}

fn write_resume(path: &Path, trainer: &TrainerState, log: &RunLog, seed: u64) -> Result<()> {
    let file = ResumeFile {
        seed,
        trainer: trainer.clone(),
        log: log.clone(),
    };
    let tmp = path.with_extension("tmp");
    serde_json::to_writer(std::io::BufWriter::new(std::fs::File::create(&tmp)?), &file)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_resume(path: &Path) -> Result<ResumeFile> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(reader)?)
}

pub const RUN_LOG_HEADER: &str =
    "epoch,mean_predator_reward,mean_prey_reward,epsilon,dial_loss,iql_loss_prey,iql_loss_pred";

/// Writes the per-epoch log as CSV; optional losses are left empty in the
/// modes that do not produce them.
pub fn write_run_log_csv<W: Write>(out: &mut W, log: &RunLog) -> Result<()> {
    writeln!(out, "{RUN_LOG_HEADER}")?;
    for r in log {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.mean_predator_reward,
            r.mean_prey_reward,
            r.epsilon,
            opt(r.dial_loss),
            r.iql_loss_prey,
            opt(r.iql_loss_pred)
        )?;
    }
    Ok(())
}

/// Parses a CSV produced by [`write_run_log_csv`].
pub fn read_run_log_csv(path: &Path) -> Result<RunLog> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut log = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            if line != RUN_LOG_HEADER {
                return Err(Error::Parse(format!(
                    "unexpected run-log header {line:?}"
                )));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse(format!(
                "run-log line {} has {} fields, expected 7",
                lineno + 1,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Parse(format!("bad number {s:?} on line {}", lineno + 1)))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        log.push(EpochRecord {
            epoch: fields[0]
                .parse()
                .map_err(|_| Error::Parse(format!("bad epoch {:?}", fields[0])))?,
            mean_predator_reward: num(fields[1])?,
            mean_prey_reward: num(fields[2])?,
            epsilon: num(fields[3])?,
            dial_loss: opt(fields[4])?,
            iql_loss_prey: num(fields[5])?,
            iql_loss_pred: opt(fields[6])?,
        });
    }
    Ok(log)
}
