use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Scenario;
use crate::error::{Error, Result};
use crate::nn::{load_weights, save_weights, Activation, MlpParams};
use crate::sim::{FaultMask, STATE_DIM};

pub const HIDDEN: usize = 64;
const POLICY_HEAD_SCALE: f64 = 0.01;

/// Policy and value networks trained for one fault configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerBundle {
    pub scenario: Scenario,
    pub policy: MlpParams,
    pub value: MlpParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub scenario: Scenario,
    pub config_hash: String,
    pub epochs: usize,
    pub seed: u64,
}

impl ControllerBundle {
    pub fn init<R: Rng + ?Sized>(scenario: Scenario, rng: &mut R) -> Self {
        let n = scenario.outputs();
        Self {
            scenario,
            policy: Self::init_policy(n, rng),
            value: MlpParams::init(&[STATE_DIM, HIDDEN, HIDDEN, 1], Activation::Tanh, rng),
        }
    }

    /// Glorot initialization with the output layer shrunk to 1% so an
    /// untrained policy starts close to hover.
    fn init_policy<R: Rng + ?Sized>(outputs: usize, rng: &mut R) -> MlpParams {
        let mut p = MlpParams::init(&[STATE_DIM, HIDDEN, HIDDEN, outputs], Activation::Tanh, rng);
        let head = p.layers.last_mut().expect("three layers");
        head.weight.iter_mut().for_each(|w| *w *= POLICY_HEAD_SCALE);
        p
    }

    pub fn mask(&self) -> FaultMask {
        self.scenario.mask()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.mask().functional_count();
        if self.policy.n_out() != n {
            return Err(Error::Arity {
                expected: n,
                found: self.policy.n_out(),
            });
        }
        if self.policy.n_in() != STATE_DIM || self.value.n_in() != STATE_DIM || self.value.n_out() != 1 {
            return Err(Error::ShapeMismatch {
                what: "controller bundle".into(),
                expected: format!("{STATE_DIM} inputs, value output 1"),
                found: format!(
                    "policy {:?}, value {:?}",
                    self.policy.sizes(),
                    self.value.sizes()
                ),
            });
        }
        Ok(())
    }

    pub fn paths(dir: &Path, scenario: Scenario) -> (PathBuf, PathBuf, PathBuf) {
        let stem = format!("ctrl-{}", scenario.file_stem());
        (
            dir.join(format!("{stem}.policy.fqnn")),
            dir.join(format!("{stem}.value.fqnn")),
            dir.join(format!("{stem}.json")),
        )
    }

    pub fn save(&self, dir: &Path, manifest: &BundleManifest) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (p, v, m) = Self::paths(dir, self.scenario);
        save_weights(&self.policy, p)?;
        save_weights(&self.value, v)?;
        fs::write(m, serde_json::to_string_pretty(manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path, scenario: Scenario) -> Result<(Self, BundleManifest)> {
        let (p, v, m) = Self::paths(dir, scenario);
        let manifest: BundleManifest = serde_json::from_str(&fs::read_to_string(m)?)?;
        if manifest.scenario != scenario {
            return Err(Error::Format(format!(
                "manifest scenario {} does not match {}",
                manifest.scenario, scenario
            )));
        }
        let bundle = Self {
            scenario,
            policy: load_weights(p)?,
            value: load_weights(v)?,
        };
        bundle.check()?;
        Ok((bundle, manifest))
    }
}
