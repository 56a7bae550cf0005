//! PPO training of waypoint controllers for a given fault configuration.
//!
//! The policy and value networks take the 18-element waypoint-relative state.
//! Costs (not rewards) are minimized throughout: value targets are
//! discounted cost-to-go and advantages are negated before entering the
//! clipped surrogate.

mod actions;
mod bundle;
mod reward;
mod rollout;
mod train;
mod update;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{OptimizerConfig, OptimizerMode};
use crate::sim::{opposite_propeller, FaultMask};

pub use actions::{combine_actions, cyclic_assign, output_to_speed, policy_mean, ControlOutput};
pub use bundle::{BundleManifest, ControllerBundle};
pub use reward::{mc_returns, reward};
pub use rollout::{collect_rollouts, gaussian_log_density, RolloutBatch, Trajectory, TrainingWorld};
pub use train::{train_controller, train_from, write_training_log, TrainLogRow};
pub use update::{ppo_update, surrogate_term, PpoLearner, UpdateStats};

/// Which controller to train: the fault configuration it flies with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scenario {
    FourProp,
    /// One failed propeller (1-based).
    ThreeProp { failed: usize },
    /// Two opposing failed propellers; `first` is the lower index (1 or 2).
    TwoPropOpposing { first: usize },
}

impl Scenario {
    pub fn mask(&self) -> FaultMask {
        match *self {
            Scenario::FourProp => FaultMask::healthy(),
            Scenario::ThreeProp { failed } => FaultMask::healthy().fail(failed),
            Scenario::TwoPropOpposing { first } => FaultMask::healthy().fail(first).fail(opposite_propeller(first)),
        }
    }

    pub fn from_mask(mask: &FaultMask) -> Result<Self> {
        match mask.failed().as_slice() {
            [] => Ok(Scenario::FourProp),
            [p] => Ok(Scenario::ThreeProp { failed: *p }),
            [a, b] if b - a == 2 => Ok(Scenario::TwoPropOpposing { first: *a }),
            _ => Err(Error::UnsupportedMask(mask.to_string())),
        }
    }

    pub fn outputs(&self) -> usize {
        self.mask().functional_count()
    }

    /// Short name used for file stems, e.g. `3prop-f3`.
    pub fn file_stem(&self) -> String {
        match *self {
            Scenario::FourProp => "4prop".into(),
            Scenario::ThreeProp { failed } => format!("3prop-f{failed}"),
            Scenario::TwoPropOpposing { first } => format!("2prop-opposing-f{}{}", first, opposite_propeller(first)),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.file_stem())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    /// Accepts `4prop`, `3prop` (prop 3 failed), `3prop-f<k>`,
    /// `2prop-opposing` (props 2 and 4 failed), `2prop-opposing-f13|f24`.
    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownScenario(s.to_string());
        match s {
            "4prop" => return Ok(Scenario::FourProp),
            "3prop" => return Ok(Scenario::ThreeProp { failed: 3 }),
            "2prop-opposing" => return Ok(Scenario::TwoPropOpposing { first: 2 }),
            "2prop-opposing-f13" => return Ok(Scenario::TwoPropOpposing { first: 1 }),
            "2prop-opposing-f24" => return Ok(Scenario::TwoPropOpposing { first: 2 }),
            _ => {}
        }
        let k = s.strip_prefix("3prop-f").ok_or_else(unknown)?;
        match k.parse::<usize>() {
            Ok(failed @ 1..=4) => Ok(Scenario::ThreeProp { failed }),
            _ => Err(unknown()),
        }
    }
}

impl TryFrom<String> for Scenario {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scenario> for String {
    fn from(s: Scenario) -> String {
        s.file_stem()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub clip_epsilon: f64,
    pub policy_optimizer: OptimizerConfig,
    pub value_optimizer: OptimizerConfig,
    /// Value-network passes over each batch.
    pub value_updates: usize,
    /// σ of the Gaussian exploration noise, normalized action units.
    pub exploration_std: f64,
    pub epochs_max: usize,
    pub value_loss_stop: f64,
    pub n_traj: usize,
    pub traj_len: usize,
    pub minibatch_size: usize,
    pub huber_delta: f64,
    /// Cost added on the step that leaves the flight box or touches the ground.
    pub termination_cost: f64,
    /// Half-width of the cubic flight box centred on the waypoint, m.
    pub box_half_width: f64,
    /// World height of the training waypoint, m.
    pub train_altitude: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            clip_epsilon: 0.2,
            policy_optimizer: OptimizerConfig {
                mode: OptimizerMode::adam(),
                learning_rate: 3e-4,
            },
            value_optimizer: OptimizerConfig {
                mode: OptimizerMode::adam(),
                learning_rate: 1e-3,
            },
            value_updates: 5,
            exploration_std: 0.1,
            epochs_max: 300,
            value_loss_stop: 1e-4,
            n_traj: 16,
            traj_len: 200,
            minibatch_size: 64,
            huber_delta: 1.0,
            termination_cost: 10.0,
            box_half_width: 25.0,
            train_altitude: 25.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(self.clip_epsilon > 0.0) {
            return bad("clip_epsilon must be > 0");
        }
        if !(self.exploration_std > 0.0) {
            return bad("exploration_std must be > 0");
        }
        if self.n_traj == 0 || self.traj_len == 0 || self.minibatch_size == 0 {
            return bad("n_traj, traj_len and minibatch_size must be positive");
        }
        Ok(())
    }
}
