use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::reward::mc_returns;
use super::rollout::{gaussian_log_density, RolloutBatch};
use super::{ControllerBundle, PpoConfig};
use crate::error::{Error, Result};
use crate::nn::{huber_loss, Optimizer, ParamSet};
use crate::sim::STATE_DIM;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateStats {
    /// Mean Huber loss of the final value pass.
    pub value_loss: f64,
    /// Mean clipped-surrogate loss over the policy pass.
    pub surrogate_loss: f64,
    /// Mean Huber loss of each value pass, in order.
    pub value_loss_history: Vec<f64>,
    /// Fraction of policy samples whose gradient was cut by clipping.
    pub clipped_fraction: f64,
}

struct Sample<'a> {
    obs: &'a [f64; STATE_DIM],
    action: &'a [f64],
    log_prob: f64,
    target: f64,
}

/// PPO clipped objective for one sample (to be maximized), with its
/// derivative in the probability ratio. The derivative is zero on the
/// clipped branch.
pub fn surrogate_term(ratio: f64, advantage: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        (clipped, 0.0)
    }
}

fn normalize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    values.iter_mut().for_each(|v| *v = (*v - mean) / (std + 1e-8));
}

/// Owns a bundle together with the optimizer state that persists across
/// training iterations.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    pub bundle: ControllerBundle,
    pub config: PpoConfig,
    policy_opt: Optimizer,
    value_opt: Optimizer,
}

impl PpoLearner {
    pub fn new(bundle: ControllerBundle, config: PpoConfig) -> Self {
        Self {
            policy_opt: Optimizer::new(config.policy_optimizer),
            value_opt: Optimizer::new(config.value_optimizer),
            bundle,
            config,
        }
    }

    /// Value network `n_v` passes on Huber loss against Monte-Carlo targets,
    /// then one clipped-surrogate pass for the policy.
    pub fn update(&mut self, batch: &RolloutBatch, seed: u64) -> Result<UpdateStats> {
        if batch.steps() == 0 {
            return Err(Error::InvalidParameter("empty rollout batch".into()));
        }
        let cfg = self.config.clone();
        let mut samples = Vec::with_capacity(batch.steps());
        for t in &batch.trajectories {
            let tail = if t.terminated {
                0.0
            } else {
                self.bundle.value.forward(&t.terminal_state)?[0]
            };
            let targets = mc_returns(&t.rewards, tail, cfg.gamma);
            for i in 0..t.len() {
                samples.push(Sample {
                    obs: &t.states[i],
                    action: &t.actions[i],
                    log_prob: t.log_probs[i],
                    target: targets[i],
                });
            }
        }

        // Cost advantages against the pre-update baseline, negated so that
        // positive means better than expected.
        let mut advantages = Vec::with_capacity(samples.len());
        for s in &samples {
            advantages.push(s.target - self.bundle.value.forward(s.obs)?[0]);
        }
        normalize(&mut advantages);
        advantages.iter_mut().for_each(|a| *a = -*a);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mb = cfg.minibatch_size;

        let mut stats = UpdateStats::default();
        for _ in 0..cfg.value_updates {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(mb) {
                let mut grads = self.bundle.value.zeros_like();
                let scale = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let (out, cache) = self.bundle.value.forward_cached(samples[i].obs)?;
                    let (l, dl) = huber_loss(out[0], samples[i].target, cfg.huber_delta);
                    total += l;
                    self.bundle.value.backward(&cache, &[dl * scale], &mut grads);
                }
                self.value_opt.step(&mut self.bundle.value, &grads)?;
            }
            stats.value_loss_history.push(total / samples.len() as f64);
        }
        stats.value_loss = match stats.value_loss_history.last() {
            Some(&l) => l,
            None => {
                let mut total = 0.0;
                for s in &samples {
                    total += huber_loss(self.bundle.value.forward(s.obs)?[0], s.target, cfg.huber_delta).0;
                }
                total / samples.len() as f64
            }
        };

        let sigma = cfg.exploration_std;
        let mut surrogate = 0.0;
        let mut clipped = 0usize;
        order.shuffle(&mut rng);
        for chunk in order.chunks(mb) {
            let mut grads = self.bundle.policy.zeros_like();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let s = &samples[i];
                let (z, cache) = self.bundle.policy.forward_cached(s.obs)?;
                let mean: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
                let ratio = (gaussian_log_density(s.action, &mean, sigma) - s.log_prob).exp();
                let (obj, dobj_dratio) = surrogate_term(ratio, advantages[i], cfg.clip_epsilon);
                surrogate -= obj;
                if dobj_dratio == 0.0 {
                    clipped += 1;
                    continue;
                }
                // d(−obj)/dz_k = −dobj/dratio · ratio · (a_k − μ_k)/σ² · (1 − μ_k²)
                let dz: Vec<f64> = mean
                    .iter()
                    .zip(s.action)
                    .map(|(m, a)| -dobj_dratio * ratio * (a - m) / (sigma * sigma) * (1.0 - m * m) * scale)
                    .collect();
                self.bundle.policy.backward(&cache, &dz, &mut grads);
            }
            self.policy_opt.step(&mut self.bundle.policy, &grads)?;
        }
        stats.surrogate_loss = surrogate / samples.len() as f64;
        stats.clipped_fraction = clipped as f64 / samples.len() as f64;
        Ok(stats)
    }
}

/// Single update with fresh optimizer state.
pub fn ppo_update(
    bundle: &ControllerBundle,
    batch: &RolloutBatch,
    config: &PpoConfig,
    seed: u64,
) -> Result<(ControllerBundle, UpdateStats)> {
    let mut learner = PpoLearner::new(bundle.clone(), config.clone());
    let stats = learner.update(batch, seed)?;
    Ok((learner.bundle, stats))
}


#[cfg(test)]
mod bandit {
    use super::*;
    use crate::ppo::{policy_mean, Scenario, Trajectory};
    use rand_distr::{Distribution, StandardNormal};

    /// One-step episodes whose cost is the squared distance of the action
    /// from 0.5: repeated updates must pull the mean toward 0.5.
    #[test]
    fn policy_moves_toward_cheaper_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bundle = ControllerBundle::init(Scenario::FourProp, &mut rng);
        let cfg = PpoConfig {
            gamma: 0.0,
            value_updates: 0,
            ..PpoConfig::default()
        };
        let obs = [0.1; STATE_DIM];
        let mut learner = PpoLearner::new(bundle, cfg.clone());
        let start = policy_mean(&learner.bundle.policy, &obs).unwrap();
        let dist = |m: &[f64]| m.iter().map(|v| (v - 0.5).powi(2)).sum::<f64>();
        for round in 0..30 {
            let mean = policy_mean(&learner.bundle.policy, &obs).unwrap();
            let trajectories = (0..256)
                .map(|_| {
                    let a: Vec<f64> = mean
                        .iter()
                        .map(|m| m + cfg.exploration_std * { let z: f64 = StandardNormal.sample(&mut rng); z })
                        .collect();
                    Trajectory {
                        states: vec![obs],
                        log_probs: vec![gaussian_log_density(&a, &mean, cfg.exploration_std)],
                        rewards: vec![dist(&a)],
                        actions: vec![a],
                        terminal_state: obs,
                        terminated: true,
                    }
                })
                .collect();
            learner.update(&RolloutBatch { trajectories }, round).unwrap();
        }
        let end = policy_mean(&learner.bundle.policy, &obs).unwrap();
        assert!(dist(&end) < 0.5 * dist(&start), "start {start:?} end {end:?}");
    }
}
