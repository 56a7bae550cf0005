use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::actions::{combine_actions, policy_mean};
use super::reward::reward;
use super::{ControllerBundle, PpoConfig};
use crate::error::Result;
use crate::pd::PdGains;
use crate::sim::{flatten_state, sample_initial_state, step, InitMode, QuadParams, STATE_DIM};

/// Physical setting shared by every training environment.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingWorld {
    pub params: QuadParams,
    pub gains: PdGains,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Waypoint-relative observations, one per recorded step.
    pub states: Vec<[f64; STATE_DIM]>,
    pub actions: Vec<Vec<f64>>,
    /// Log-density of each sampled action under the behaviour policy.
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminal_state: [f64; STATE_DIM],
    /// Ended early by leaving the flight box or touching the ground.
    pub terminated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
}

impl RolloutBatch {
    pub fn steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    /// Total cost divided by total recorded steps.
    pub fn mean_cost(&self) -> f64 {
        let total: f64 = self.trajectories.iter().flat_map(|t| &t.rewards).sum();
        total / self.steps().max(1) as f64
    }
}

/// log N(action | mean, σ²I). Zero when σ is zero.
pub fn gaussian_log_density(action: &[f64], mean: &[f64], std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let norm = std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
    action
        .iter()
        .zip(mean)
        .map(|(a, m)| -0.5 * ((a - m) / std).powi(2) - norm)
        .sum()
}

fn run_episode(
    bundle: &ControllerBundle,
    config: &PpoConfig,
    world: &TrainingWorld,
    seed: u64,
    index: usize,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mask = bundle.mask();
    let waypoint = Vector3::new(0.0, 0.0, config.train_altitude);
    let mut state = sample_initial_state(&mut rng, InitMode::Gaussian3Sigma);
    state.position += waypoint;

    let cap = config.traj_len;
    let mut traj = Trajectory {
        states: Vec::with_capacity(cap),
        actions: Vec::with_capacity(cap),
        log_probs: Vec::with_capacity(cap),
        rewards: Vec::with_capacity(cap),
        terminal_state: [0.0; STATE_DIM],
        terminated: false,
    };
    for _ in 0..cap {
        let rel = state.relative_to(&waypoint);
        let obs = flatten_state(&rel);
        let mean = policy_mean(&bundle.policy, &obs)?;
        let action: Vec<f64> = mean
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + config.exploration_std * z
            })
            .collect();
        let logp = gaussian_log_density(&action, &mean, config.exploration_std);
        let control = combine_actions(&action, &mask, &state, &world.gains, &world.params)?;
        let next = step(&state, &control.rotor, &control.extra(), &mask, &world.params, crate::sim::DEFAULT_DT)?;
        let next_rel = next.relative_to(&waypoint);
        let mut cost = reward(&next_rel);
        let out_of_box = next_rel.position.amax() > config.box_half_width;
        let grounded = next.position.z <= 0.0;
        if out_of_box || grounded {
            cost += config.termination_cost;
            traj.terminated = true;
        }
        traj.states.push(obs);
        traj.actions.push(action);
        traj.log_probs.push(logp);
        traj.rewards.push(cost);
        state = next;
        if traj.terminated {
            break;
        }
    }
    traj.terminal_state = flatten_state(&state.relative_to(&waypoint));
    Ok(traj)
}

/// Runs `config.n_traj` independent episodes. Each episode draws from its
/// own stream of the seeded generator and results are ordered by episode
/// index, so the batch is independent of scheduling.
pub fn collect_rollouts(
    bundle: &ControllerBundle,
    config: &PpoConfig,
    world: &TrainingWorld,
    seed: u64,
) -> Result<RolloutBatch> {
    bundle.check()?;
    let trajectories = (0..config.n_traj)
        .into_par_iter()
        .map(|i| run_episode(bundle, config, world, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutBatch { trajectories })
}
