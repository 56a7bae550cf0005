use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::physics_step;
use crate::error::{Error, Result};
use crate::fd::FdStage;
use crate::hash::config_hash;
use crate::ppo::{Scenario, TrainingWorld};
use crate::sim::{opposite_propeller, sample_initial_state, FaultMask, InitMode, QuadState};
use crate::supervisor::{ControllerSet, FdModels, Supervisor, SupervisorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// Each controller alone from a random uniform initial state.
    Isolated,
    /// Failure injected during hover; detection and switching included.
    Midflight,
}

impl std::str::FromStr for FailureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isolated" => Ok(Self::Isolated),
            "midflight" => Ok(Self::Midflight),
            _ => Err(Error::InvalidParameter(format!("unknown mode {s:?}; expected isolated or midflight"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailureRateConfig {
    pub mode: FailureMode,
    pub n_runs: usize,
    /// Controller flown in isolated mode.
    pub scenario: Scenario,
    pub isolated_height: f64,
    /// Target heights swept in midflight mode.
    pub heights: Vec<f64>,
    pub stages: Vec<FdStage>,
    pub duration_s: f64,
    pub stabilize_band: f64,
    pub stabilize_s: f64,
    /// Injection delay after the detector's first legal step, inclusive.
    pub injection_delay: [u64; 2],
    pub supervisor: SupervisorConfig,
    pub world: TrainingWorld,
}

impl Default for FailureRateConfig {
    fn default() -> Self {
        Self {
            mode: FailureMode::Isolated,
            n_runs: 50,
            scenario: Scenario::FourProp,
            isolated_height: 5.0,
            heights: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            stages: vec![FdStage::FourToThree, FdStage::ThreeToTwo],
            duration_s: 10.0,
            stabilize_band: 0.25,
            stabilize_s: 2.0,
            injection_delay: [0, 200],
            supervisor: SupervisorConfig::default(),
            world: TrainingWorld::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRateRow {
    /// `isolated`, or the detector stage whose failure was injected.
    pub label: String,
    pub scenario: String,
    pub height: f64,
    pub runs: usize,
    pub crashes: usize,
    /// Crashes that happened before the failure was injected.
    pub crashes_before_failure: usize,
    pub stabilized: usize,
    pub failure_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRateReport {
    pub config_hash: String,
    pub seed: u64,
    pub config: FailureRateConfig,
    pub rows: Vec<FailureRateRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RunEnd {
    Crash { before_failure: bool },
    Stabilized,
    TimeUp,
}

fn rng_for(seed: u64, stream: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn isolated_run(controllers: &ControllerSet, cfg: &FailureRateConfig, seed: u64, run: usize) -> Result<RunEnd> {
    let mut rng = rng_for(seed, run);
    let mask = cfg.scenario.mask();
    let mut sup = Supervisor::with_detected(controllers.clone(), FdModels::default(), cfg.world, cfg.supervisor.clone(), mask)?;
    let waypoint = Vector3::new(0.0, 0.0, cfg.isolated_height);
    sup.set_waypoint(waypoint);
    let mut state = sample_initial_state(&mut rng, InitMode::Uniform);
    state.position += waypoint;
    let n = (cfg.duration_s / cfg.supervisor.dt).round() as u64;
    for _ in 0..n {
        let tick = sup.tick(&state)?;
        state = physics_step(&state, &tick, &mask, &cfg.world, cfg.supervisor.dt)?;
        if state.position.z <= 0.0 {
            return Ok(RunEnd::Crash { before_failure: false });
        }
    }
    Ok(RunEnd::TimeUp)
}

fn midflight_run(
    controllers: &ControllerSet,
    detectors: &FdModels,
    cfg: &FailureRateConfig,
    stage: FdStage,
    height: f64,
    seed: u64,
    stream: usize,
) -> Result<RunEnd> {
    let mut rng = rng_for(seed, stream);
    let dt = cfg.supervisor.dt;
    let (start_mask, prop) = match stage {
        FdStage::FourToThree => (FaultMask::healthy(), rng.gen_range(1..=4)),
        FdStage::ThreeToTwo => {
            let p0 = rng.gen_range(1..=4);
            (FaultMask::healthy().fail(p0), opposite_propeller(p0))
        }
    };
    let [lo, hi] = cfg.injection_delay;
    let at = stage.warmup().max(stage.window()) as u64 + rng.gen_range(lo..=hi);

    let mut sup = Supervisor::with_detected(controllers.clone(), detectors.clone(), cfg.world, cfg.supervisor.clone(), start_mask)?;
    let waypoint = Vector3::new(0.0, 0.0, height);
    sup.set_waypoint(waypoint);
    let mut state = QuadState::at(waypoint);
    let mut physical = start_mask;
    let needed = (cfg.stabilize_s / dt).round() as u64;
    let mut settled = 0u64;
    let n = (cfg.duration_s / dt).round() as u64;
    for k in 0..n {
        if k == at {
            physical = physical.fail(prop);
            sup.note_actual_failure(prop);
        }
        let tick = sup.tick(&state)?;
        state = physics_step(&state, &tick, &physical, &cfg.world, dt)?;
        if state.position.z <= 0.0 {
            return Ok(RunEnd::Crash { before_failure: k < at });
        }
        let switched = k >= at && sup.detected() == physical;
        if switched && (state.position.z - height).abs() < cfg.stabilize_band {
            settled += 1;
            if settled >= needed {
                return Ok(RunEnd::Stabilized);
            }
        } else {
            settled = 0;
        }
    }
    Ok(RunEnd::TimeUp)
}

fn row(label: &str, scenario: String, height: f64, ends: &[RunEnd]) -> FailureRateRow {
    let crashes = ends.iter().filter(|e| matches!(e, RunEnd::Crash { .. })).count();
    FailureRateRow {
        label: label.into(),
        scenario,
        height,
        runs: ends.len(),
        crashes,
        crashes_before_failure: ends.iter().filter(|e| matches!(e, RunEnd::Crash { before_failure: true })).count(),
        stabilized: ends.iter().filter(|e| **e == RunEnd::Stabilized).count(),
        failure_rate: if ends.is_empty() { f64::NAN } else { crashes as f64 / ends.len() as f64 },
    }
}

/// Counts ground contacts (z ≤ 0). Runs execute in parallel; every run has
/// its own random stream and rows are assembled in a fixed order.
pub fn failure_rate(controllers: &ControllerSet, detectors: &FdModels, cfg: &FailureRateConfig, seed: u64) -> Result<FailureRateReport> {
    if !(cfg.duration_s > 0.0) {
        return Err(Error::InvalidParameter("duration_s must be > 0".into()));
    }
    if cfg.injection_delay[0] > cfg.injection_delay[1] {
        return Err(Error::InvalidParameter("injection_delay must be an increasing pair".into()));
    }
    let rows = match cfg.mode {
        FailureMode::Isolated => {
            let ends = (0..cfg.n_runs)
                .into_par_iter()
                .map(|r| isolated_run(controllers, cfg, seed, r))
                .collect::<Result<Vec<_>>>()?;
            vec![row("isolated", cfg.scenario.file_stem(), cfg.isolated_height, &ends)]
        }
        FailureMode::Midflight => {
            if cfg.heights.is_empty() {
                return Err(Error::InvalidParameter("midflight mode needs at least one height".into()));
            }
            for stage in &cfg.stages {
                if detectors.get(*stage).is_none() {
                    return Err(Error::InvalidParameter(format!("no {stage} detector loaded")));
                }
            }
            let nh = cfg.heights.len();
            let jobs: Vec<(usize, usize, usize)> = (0..cfg.stages.len())
                .flat_map(|s| (0..nh).flat_map(move |h| (0..cfg.n_runs).map(move |r| (s, h, r))))
                .collect();
            let ends = jobs
                .par_iter()
                .map(|&(s, h, r)| {
                    let stream = (s * nh + h) * cfg.n_runs + r;
                    midflight_run(controllers, detectors, cfg, cfg.stages[s], cfg.heights[h], seed, stream)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut rows = Vec::new();
            for (s, stage) in cfg.stages.iter().enumerate() {
                for (h, &height) in cfg.heights.iter().enumerate() {
                    let start = (s * nh + h) * cfg.n_runs;
                    let scenario = match stage {
                        FdStage::FourToThree => "4prop",
                        FdStage::ThreeToTwo => "3prop",
                    };
                    rows.push(row(stage.name(), scenario.into(), height, &ends[start..start + cfg.n_runs]));
                }
            }
            rows
        }
    };
    Ok(FailureRateReport {
        config_hash: config_hash(cfg),
        seed,
        config: cfg.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::tests::controllers;
    use crate::fd::FdModel;

    #[test]
    fn isolated_single_row_and_deterministic() {
        let cfg = FailureRateConfig {
            n_runs: 4,
            duration_s: 1.0,
            ..Default::default()
        };
        let a = failure_rate(&controllers(1), &FdModels::default(), &cfg, 3).unwrap();
        let b = failure_rate(&controllers(1), &FdModels::default(), &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 1);
        assert_eq!(a.rows[0].runs, 4);
        assert_eq!(a.seed, 3);
        assert_eq!(a.config_hash, config_hash(&cfg));
    }

    #[test]
    fn midflight_rows_follow_heights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut fd = FdModels::default();
        fd.insert(FdModel::init(FdStage::FourToThree, &mut rng));
        let cfg = FailureRateConfig {
            mode: FailureMode::Midflight,
            n_runs: 2,
            heights: vec![0.5, 1.0, 1.5],
            stages: vec![FdStage::FourToThree],
            duration_s: 2.0,
            injection_delay: [0, 10],
            ..Default::default()
        };
        let rep = failure_rate(&controllers(1), &fd, &cfg, 1).unwrap();
        let heights: Vec<f64> = rep.rows.iter().map(|r| r.height).collect();
        assert_eq!(heights, vec![0.5, 1.0, 1.5]);
        assert!(rep.rows.iter().all(|r| r.runs == 2 && r.crashes <= 2));

        let missing = FailureRateConfig {
            stages: vec![FdStage::ThreeToTwo],
            ..cfg
        };
        assert!(failure_rate(&controllers(1), &fd, &missing, 1).is_err());
    }
}
