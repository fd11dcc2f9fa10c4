//! Deterministic 2-predator vs 2-prey particle arena.
//!
//! Agents are indexed `0, 1` (predators) and `2, 3` (prey). Each predator is
//! secretly assigned one prey at reset; rewards are the negated sum of
//! predator-to-target distances, shared within each team and exactly
//! zero-sum between teams. All randomness comes from the caller's
//! seed-stream, so a `(seed, action sequence)` pair pins a trajectory to
//! the bit.

use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const AGENT_COUNT: usize = 4;
pub const PREDATORS: [usize; 2] = [0, 1];
pub const PREY: [usize; 2] = [2, 3];

/// Observation width of a predator, every mode.
pub const PREDATOR_OBS_LEN: usize = 12;
/// Observation width of a prey outside public communication.
pub const PREY_OBS_BASE_LEN: usize = 10;

pub fn is_predator(agent: usize) -> bool {
    agent < 2
}

/// The other member of `agent`'s team.
pub fn teammate(agent: usize) -> usize {
    match agent {
        0 => 1,
        1 => 0,
        2 => 3,
        3 => 2,
        _ => panic!("agent index {agent} out of range"),
    }
}

/// Who may see what: the four experimental configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Predators see only their teammate's target and cannot talk.
    NoComm,
    /// Each predator sees its own target; nothing to communicate.
    FullObs,
    /// Predators exchange messages the prey cannot hear.
    PrivateComm,
    /// Predators exchange messages and the prey overhear them.
    PublicComm,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::NoComm,
        Mode::FullObs,
        Mode::PrivateComm,
        Mode::PublicComm,
    ];

    /// True when predators learn a message channel.
    pub fn is_comm(self) -> bool {
        matches!(self, Mode::PrivateComm | Mode::PublicComm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::NoComm => "no_comm",
            Mode::FullObs => "full_obs",
            Mode::PrivateComm => "private_comm",
            Mode::PublicComm => "public_comm",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "no_comm" => Ok(Mode::NoComm),
            "full_obs" => Ok(Mode::FullObs),
            "private_comm" => Ok(Mode::PrivateComm),
            "public_comm" => Ok(Mode::PublicComm),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected no_comm, full_obs, private_comm or public_comm)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Arena physics and episode shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub arena_half_width: f64,
    pub dt: f64,
    /// Per-step velocity retention factor.
    pub velocity_damping: f64,
    pub predator_accel: f64,
    pub prey_accel: f64,
    pub predator_max_speed: f64,
    pub prey_max_speed: f64,
    pub episode_length: u32,
    pub mode: Mode,
}

impl EnvConfig {
    pub fn new(mode: Mode) -> EnvConfig {
        EnvConfig {
            arena_half_width: 1.0,
            dt: 0.1,
            velocity_damping: 0.75,
            predator_accel: 3.0,
            prey_accel: 4.0,
            predator_max_speed: 1.0,
            prey_max_speed: 1.3,
            episode_length: 30,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("arena_half_width", self.arena_half_width),
            ("dt", self.dt),
            ("predator_accel", self.predator_accel),
            ("prey_accel", self.prey_accel),
            ("predator_max_speed", self.predator_max_speed),
            ("prey_max_speed", self.prey_max_speed),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be strictly positive")));
            }
        }
        if !(self.velocity_damping > 0.0 && self.velocity_damping <= 1.0) {
            return Err(Error::Config("velocity_damping must be in (0, 1]".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::Config("episode_length must be >= 1".into()));
        }
        Ok(())
    }

    fn accel(&self, agent: usize) -> f64 {
        if is_predator(agent) {
            self.predator_accel
        } else {
            self.prey_accel
        }
    }

    fn max_speed(&self, agent: usize) -> f64 {
        if is_predator(agent) {
            self.predator_max_speed
        } else {
            self.prey_max_speed
        }
    }
}

/// Full simulator state: joint positions/velocities, the secret target
/// assignments, and the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    /// Indexed `[predator0, predator1, prey0, prey1]`.
    pub positions: [[f64; 2]; AGENT_COUNT],
    pub velocities: [[f64; 2]; AGENT_COUNT],
    /// Prey index in `{0, 1}` assigned to each predator.
    pub targets: [usize; 2],
    pub step: u32,
}

/// Discrete movement command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    NoOp,
    PosX,
    NegX,
    PosY,
    NegY,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [
        Action::NoOp,
        Action::PosX,
        Action::NegX,
        Action::PosY,
        Action::NegY,
    ];

    pub fn index(self) -> usize {
        match self {
            Action::NoOp => 0,
            Action::PosX => 1,
            Action::NegX => 2,
            Action::PosY => 3,
            Action::NegY => 4,
        }
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidCall(format!("action index {i} out of range 0..5")))
    }

    fn direction(self) -> [f64; 2] {
        match self {
            Action::NoOp => [0.0, 0.0],
            Action::PosX => [1.0, 0.0],
            Action::NegX => [-1.0, 0.0],
            Action::PosY => [0.0, 1.0],
            Action::NegY => [0.0, -1.0],
        }
    }
}

/// Outcome of one joint step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: WorldState,
    pub predator_reward: f64,
    pub prey_reward: f64,
    pub done: bool,
}

/// Fresh episode: positions uniform in the arena, velocities zero, each
/// predator's target drawn independently and uniformly from `{0, 1}`.
pub fn reset<R: Rng + ?Sized>(config: &EnvConfig, rng: &mut R) -> WorldState {
    let w = config.arena_half_width;
    let mut positions = [[0.0; 2]; AGENT_COUNT];
    for pos in &mut positions {
        pos[0] = rng.gen_range(-w..=w);
        pos[1] = rng.gen_range(-w..=w);
    }
    let targets = [rng.gen_range(0..2usize), rng.gen_range(0..2usize)];
    WorldState {
        positions,
        velocities: [[0.0; 2]; AGENT_COUNT],
        targets,
        step: 0,
    }
}

/// Advances the world one step: damped accelerations, per-kind speed caps,
/// positions clamped to the arena, rewards of the new state.
pub fn step(state: &WorldState, actions: &[Action; AGENT_COUNT], config: &EnvConfig) -> Result<StepResult> {
    if state.step >= config.episode_length {
        return Err(Error::InvalidCall(format!(
            "episode already done at step {}",
            state.step
        )));
    }
    let mut next = state.clone();
    let w = config.arena_half_width;
    for (agent, action) in actions.iter().enumerate() {
        let dir = action.direction();
        let accel = config.accel(agent);
        let vel = &mut next.velocities[agent];
        vel[0] = vel[0] * config.velocity_damping + accel * dir[0] * config.dt;
        vel[1] = vel[1] * config.velocity_damping + accel * dir[1] * config.dt;
        let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
        let cap = config.max_speed(agent);
        if speed > cap {
            let scale = cap / speed;
            vel[0] *= scale;
            vel[1] *= scale;
        }
        let pos = &mut next.positions[agent];
        pos[0] = (pos[0] + vel[0] * config.dt).clamp(-w, w);
        pos[1] = (pos[1] + vel[1] * config.dt).clamp(-w, w);
    }
    next.step += 1;
    let (predator_reward, prey_reward) = compute_rewards(&next);
    let done = next.step == config.episode_length;
    Ok(StepResult {
        next_state: next,
        predator_reward,
        prey_reward,
        done,
    })
}

/// Team rewards: predators get the negated sum of distances to their
/// assigned targets; prey get the exact negation.
pub fn compute_rewards(state: &WorldState) -> (f64, f64) {
    let mut total = 0.0;
    for pred in PREDATORS {
        let target = PREY[state.targets[pred]];
        let dx = state.positions[pred][0] - state.positions[target][0];
        let dy = state.positions[pred][1] - state.positions[target][1];
        total += (dx * dx + dy * dy).sqrt();
    }
    (-total, total)
}

/// Observation width for `(mode, agent)`; constant across an episode.
pub fn observation_len(mode: Mode, agent: usize) -> usize {
    if is_predator(agent) {
        PREDATOR_OBS_LEN
    } else if mode == Mode::PublicComm {
        PREY_OBS_BASE_LEN + 2
    } else {
        PREY_OBS_BASE_LEN
    }
}

/// Builds an agent's observation vector.
///
/// Predators: own position and velocity, teammate and prey relative
/// positions, then a target one-hot (the teammate's target, or their own in
/// full observability). Prey: own position and velocity plus relative
/// positions of the other prey and both predators; under public
/// communication the two predator message scalars are appended (callers
/// pass zeros at episode start, before any exchange).
pub fn observe(
    state: &WorldState,
    agent: usize,
    config: &EnvConfig,
    messages: Option<[f64; 2]>,
) -> Result<Vec<f64>> {
    if agent >= AGENT_COUNT {
        return Err(Error::InvalidCall(format!("agent index {agent} out of range")));
    }
    let expects_messages = config.mode == Mode::PublicComm && !is_predator(agent);
    if messages.is_some() != expects_messages {
        return Err(Error::InvalidCall(if expects_messages {
            format!("prey observation in {} requires messages", config.mode)
        } else {
            format!(
                "messages supplied to agent {agent} in {}, which does not consume them",
                config.mode
            )
        }));
    }

    let own = state.positions[agent];
    let rel = |other: usize| {
        [
            state.positions[other][0] - own[0],
            state.positions[other][1] - own[1],
        ]
    };

    let mut obs = Vec::with_capacity(observation_len(config.mode, agent));
    obs.extend_from_slice(&own);
    obs.extend_from_slice(&state.velocities[agent]);
    if is_predator(agent) {
        obs.extend_from_slice(&rel(teammate(agent)));
        obs.extend_from_slice(&rel(PREY[0]));
        obs.extend_from_slice(&rel(PREY[1]));
        let shown_target = if config.mode == Mode::FullObs {
            state.targets[agent]
        } else {
            state.targets[teammate(agent)]
        };
        obs.push(if shown_target == 0 { 1.0 } else { 0.0 });
        obs.push(if shown_target == 1 { 1.0 } else { 0.0 });
    } else {
        obs.extend_from_slice(&rel(teammate(agent)));
        obs.extend_from_slice(&rel(PREDATORS[0]));
        obs.extend_from_slice(&rel(PREDATORS[1]));
        if let Some(msgs) = messages {
            obs.push(msgs[0]);
            obs.push(msgs[1]);
        }
    }
    Ok(obs)
}

/// One row of the trajectory export.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub episode: usize,
    pub step: u32,
    pub agent: usize,
    pub px: f64,
    pub py: f64,
    pub vx: f64,
    pub vy: f64,
    pub action: usize,
    pub reward: f64,
    /// Assigned prey index for predators; empty for prey.
    pub target: Option<usize>,
}

pub const TRAJECTORY_HEADER: &str = "episode,step,agent,px,py,vx,vy,action,reward,target";

/// Writes trajectory rows as CSV (with header).
pub fn write_trajectory_csv<W: Write>(out: &mut W, rows: &[TrajectoryRow]) -> Result<()> {
    writeln!(out, "{TRAJECTORY_HEADER}")?;
    for r in rows {
        let target = r.target.map(|t| t.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.episode, r.step, r.agent, r.px, r.py, r.vx, r.vy, r.action, r.reward, target
        )?;
    }
    Ok(())
}
