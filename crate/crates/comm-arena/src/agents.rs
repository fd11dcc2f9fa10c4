//! Policy containers and action selection.
//!
//! Communicating predators run two networks: a single-affine-layer message
//! net (observation -> one non-negative scalar, ReLU) and an action net
//! (observation + teammate message -> 5 Q-values). Prey, and predators in
//! the non-communicating modes, run one independent Q-network of the same
//! hidden architecture. Each team owns exactly one parameter set, evaluated
//! by both members.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Activation, DenseNet, ForwardTrace};
use crate::env::{self, Action, Mode};
use crate::{Error, Result};

/// Hidden widths shared by the action net and the independent Q-nets.
pub const HIDDEN_DIMS: [usize; 2] = [256, 512];

/// Message net: one affine layer from the 12-wide predator observation to a
/// single ReLU output, so messages are always >= 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CNet {
    net: DenseNet,
}

impl CNet {
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> CNet {
        CNet {
            net: DenseNet::init(&[env::PREDATOR_OBS_LEN, 1], &[Activation::Relu], rng),
        }
    }

    /// Wraps an existing network, enforcing the single-layer 12 -> 1 ReLU
    /// shape.
    pub fn from_dense(net: DenseNet) -> Result<CNet> {
        let ok = net.layers().len() == 1
            && net.input_dim() == env::PREDATOR_OBS_LEN
            && net.output_dim() == 1
            && net.layers()[0].activation() == Activation::Relu;
        if !ok {
            return Err(Error::InvalidCall(
                "message net must be a single 12 -> 1 ReLU layer".into(),
            ));
        }
        Ok(CNet { net })
    }

    /// The message a predator emits for `obs`.
    pub fn compute_message(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.net.eval(obs)?[0])
    }

    /// Forward pass retaining the trace, for gradient flow back into the
    /// sender.
    pub fn message_trace(&self, obs: &[f64]) -> Result<ForwardTrace> {
        self.net.forward(obs)
    }

    pub fn dense(&self) -> &DenseNet {
        &self.net
    }

    pub(crate) fn dense_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }
}

/// Action net for communicating predators: observation plus the teammate's
/// message scalar in, 5 Q-values out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ANet {
    net: DenseNet,
}

/// Index of the message slot in the action net's input.
pub const MESSAGE_SLOT: usize = env::PREDATOR_OBS_LEN;

impl ANet {
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> ANet {
        ANet {
            net: DenseNet::init(
                &[
                    env::PREDATOR_OBS_LEN + 1,
                    HIDDEN_DIMS[0],
                    HIDDEN_DIMS[1],
                    Action::COUNT,
                ],
                &[Activation::Relu, Activation::Relu, Activation::Identity],
                rng,
            ),
        }
    }

    pub fn from_dense(net: DenseNet) -> Result<ANet> {
        let dims: Vec<usize> = std::iter::once(net.input_dim())
            .chain(net.layers().iter().map(|l| l.out_dim()))
            .collect();
        if dims
            != [
                env::PREDATOR_OBS_LEN + 1,
                HIDDEN_DIMS[0],
                HIDDEN_DIMS[1],
                Action::COUNT,
            ]
        {
            return Err(Error::InvalidCall(format!(
                "action net has dimension chain {dims:?}, expected 13 -> 256 -> 512 -> 5"
            )));
        }
        Ok(ANet { net })
    }

    fn joined(obs: &[f64], message: f64) -> Result<Vec<f64>> {
        if obs.len() != env::PREDATOR_OBS_LEN {
            return Err(Error::ShapeMismatch {
                context: "predator observation",
                expected: env::PREDATOR_OBS_LEN,
                actual: obs.len(),
            });
        }
        let mut input = Vec::with_capacity(obs.len() + 1);
        input.extend_from_slice(obs);
        input.push(message);
        Ok(input)
    }

    /// Q-values for `obs` given the teammate's message.
    pub fn compute_q(&self, obs: &[f64], message: f64) -> Result<Vec<f64>> {
        self.net.eval(&Self::joined(obs, message)?)
    }

    /// Traced forward pass; the input gradient's [`MESSAGE_SLOT`] component
    /// is the piece that crosses back into the sender's message net.
    pub fn q_trace(&self, obs: &[f64], message: f64) -> Result<ForwardTrace> {
        self.net.forward(&Self::joined(obs, message)?)
    }

    pub fn dense(&self) -> &DenseNet {
        &self.net
    }

    pub(crate) fn dense_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }
}

/// Independent Q-network (prey always; predators when not communicating).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqlNet {
    net: DenseNet,
}

impl IqlNet {
    pub fn init<R: Rng + ?Sized>(obs_len: usize, rng: &mut R) -> IqlNet {
        IqlNet {
            net: DenseNet::init(
                &[obs_len, HIDDEN_DIMS[0], HIDDEN_DIMS[1], Action::COUNT],
                &[Activation::Relu, Activation::Relu, Activation::Identity],
                rng,
            ),
        }
    }

    pub fn from_dense(net: DenseNet) -> Result<IqlNet> {
        let hidden: Vec<usize> = net.layers().iter().map(|l| l.out_dim()).collect();
        if hidden != [HIDDEN_DIMS[0], HIDDEN_DIMS[1], Action::COUNT] {
            return Err(Error::InvalidCall(format!(
                "independent Q-net has hidden chain {hidden:?}, expected 256 -> 512 -> 5"
            )));
        }
        Ok(IqlNet { net })
    }

    pub fn obs_len(&self) -> usize {
        self.net.input_dim()
    }

    pub fn compute_q(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.net.eval(obs)
    }

    pub fn q_trace(&self, obs: &[f64]) -> Result<ForwardTrace> {
        self.net.forward(obs)
    }

    pub fn dense(&self) -> &DenseNet {
        &self.net
    }

    pub(crate) fn dense_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }
}

/// Linear-by-epoch exploration schedule, constant after the anneal window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_epochs: usize,
}

impl EpsilonSchedule {
    pub fn new(start: f64, end: f64, anneal_epochs: usize) -> Result<EpsilonSchedule> {
        if !(start >= end && end >= 0.0 && start <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon schedule needs 1 >= start >= end >= 0, got start {start}, end {end}"
            )));
        }
        Ok(EpsilonSchedule {
            start,
            end,
            anneal_epochs,
        })
    }

    pub fn value(&self, epoch: usize) -> f64 {
        if self.anneal_epochs == 0 || epoch >= self.anneal_epochs {
            return self.end;
        }
        let frac = epoch as f64 / self.anneal_epochs as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// Epsilon-greedy pick over Q-values; exploitation breaks ties toward the
/// lowest action index. `epsilon == 0` never touches the seed-stream.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> Result<Action> {
    if q.len() != Action::COUNT {
        return Err(Error::ShapeMismatch {
            context: "q-values",
            expected: Action::COUNT,
            actual: q.len(),
        });
    }
    if q.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("q-values {q:?}")));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidCall(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if epsilon > 0.0 && rng.gen_range(0.0..1.0) < epsilon {
        return Action::from_index(rng.gen_range(0..Action::COUNT));
    }
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    Action::from_index(best)
}

/// The networks a finished run hands to evaluation: one shared parameter
/// set per team.
#[derive(Debug, Clone, PartialEq)]
pub enum PredatorPolicy {
    Comm { cnet: CNet, anet: ANet },
    Iql(IqlNet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    pub predators: PredatorPolicy,
    pub prey: IqlNet,
}

pub const CNET_FILE: &str = "cnet.json";
pub const ANET_FILE: &str = "anet.json";
pub const PREY_FILE: &str = "prey.json";
pub const PREDATOR_IQL_FILE: &str = "predator_iql.json";

impl PolicySet {
    /// Freshly initialized policies for `mode`. Draw order is fixed:
    /// predators first, then prey.
    pub fn init<R: Rng + ?Sized>(mode: Mode, rng: &mut R) -> PolicySet {
        let predators = if mode.is_comm() {
            PredatorPolicy::Comm {
                cnet: CNet::init(rng),
                anet: ANet::init(rng),
            }
        } else {
            PredatorPolicy::Iql(IqlNet::init(env::PREDATOR_OBS_LEN, rng))
        };
        let prey = IqlNet::init(env::observation_len(mode, env::PREY[0]), rng);
        PolicySet { predators, prey }
    }

    /// Writes one checkpoint file per network role into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        match &self.predators {
            PredatorPolicy::Comm { cnet, anet } => {
                cnet.dense().save_checkpoint(&dir.join(CNET_FILE))?;
                anet.dense().save_checkpoint(&dir.join(ANET_FILE))?;
            }
            PredatorPolicy::Iql(net) => {
                net.dense().save_checkpoint(&dir.join(PREDATOR_IQL_FILE))?;
            }
        }
        self.prey.dense().save_checkpoint(&dir.join(PREY_FILE))
    }

    /// Loads the role files that `mode` requires from `dir`.
    pub fn load(dir: &Path, mode: Mode) -> Result<PolicySet> {
        let predators = if mode.is_comm() {
            PredatorPolicy::Comm {
                cnet: CNet::from_dense(DenseNet::load_checkpoint(&dir.join(CNET_FILE))?)?,
                anet: ANet::from_dense(DenseNet::load_checkpoint(&dir.join(ANET_FILE))?)?,
            }
        } else {
            PredatorPolicy::Iql(IqlNet::from_dense(DenseNet::load_checkpoint(
                &dir.join(PREDATOR_IQL_FILE),
            )?)?)
        };
        let prey = IqlNet::from_dense(DenseNet::load_checkpoint(&dir.join(PREY_FILE))?)?;
        if prey.obs_len() != env::observation_len(mode, env::PREY[0]) {
            return Err(Error::InvalidCall(format!(
                "prey checkpoint expects {}-wide observations, mode {} provides {}",
                prey.obs_len(),
                mode,
                env::observation_len(mode, env::PREY[0])
            )));
        }
        Ok(PolicySet { predators, prey })
    }
}
