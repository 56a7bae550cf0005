use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::physics_step;
use crate::error::{Error, Result};
use crate::fd::FdStage;
use crate::hash::config_hash;
use crate::ppo::TrainingWorld;
use crate::sim::{opposite_propeller, FaultMask, QuadState};
use crate::supervisor::{ControllerSet, Event, EventKind, FdModels, Supervisor, SupervisorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectBenchConfig {
    pub n_runs: usize,
    pub height: f64,
    /// Injection happens this many steps (inclusive range) after the
    /// detector's first legal classification.
    pub injection_delay: [u64; 2],
    /// A stage counts as missed when nothing is declared within this time.
    pub max_latency_s: f64,
    pub second_stage: bool,
    pub supervisor: SupervisorConfig,
    pub world: TrainingWorld,
}

impl Default for DetectBenchConfig {
    fn default() -> Self {
        Self {
            n_runs: 20,
            height: 5.0,
            injection_delay: [0, 200],
            max_latency_s: 10.0,
            second_stage: true,
            supervisor: SupervisorConfig::default(),
            world: TrainingWorld::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: FdStage,
    pub failed_propeller: usize,
    pub injection_step: u64,
    pub detection_step: Option<u64>,
    pub detected_propeller: Option<usize>,
    /// Declared before the failure happened.
    pub false_alarm: bool,
    pub latency_s: Option<f64>,
}

impl StageOutcome {
    pub fn correct(&self) -> bool {
        !self.false_alarm && self.detected_propeller == Some(self.failed_propeller)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRun {
    pub run: usize,
    pub stages: Vec<StageOutcome>,
    /// Steps at which the policy arity differed from the detected mask.
    pub arity_violations: usize,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub runs: usize,
    pub detected: usize,
    pub correct: usize,
    pub false_alarms: usize,
    pub misses: usize,
    pub miss_rate: f64,
    /// Correctly labelled detections over all detections.
    pub correct_label_rate: f64,
    /// Over timely detections only.
    pub mean_latency_s: Option<f64>,
    /// Misses and false alarms count as infinite latency; `None` when the
    /// median itself is infinite.
    pub median_latency_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectBenchReport {
    pub config_hash: String,
    pub seed: u64,
    pub config: DetectBenchConfig,
    pub stages: Vec<StageStats>,
    pub arity_violations: usize,
    pub runs: Vec<DetectRun>,
}

/// Median with `None` standing for +∞.
pub(crate) fn median_latency(values: &[Option<f64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    m.is_finite().then_some(m)
}

fn stage_stats(stage: FdStage, outcomes: &[&StageOutcome]) -> StageStats {
    let runs = outcomes.len();
    let detected = outcomes.iter().filter(|o| o.detection_step.is_some()).count();
    let correct = outcomes.iter().filter(|o| o.correct()).count();
    let false_alarms = outcomes.iter().filter(|o| o.false_alarm).count();
    let misses = runs - detected;
    let timely: Vec<f64> = outcomes.iter().filter_map(|o| o.latency_s).collect();
    let ratio = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
    StageStats {
        stage: stage.name().into(),
        runs,
        detected,
        correct,
        false_alarms,
        misses,
        miss_rate: ratio(misses, runs),
        correct_label_rate: ratio(correct, detected),
        mean_latency_s: (!timely.is_empty()).then(|| timely.iter().sum::<f64>() / timely.len() as f64),
        median_latency_s: median_latency(&outcomes.iter().map(|o| o.latency_s).collect::<Vec<_>>()),
    }
}

struct Flight<'a> {
    sup: Supervisor,
    state: QuadState,
    physical: FaultMask,
    world: &'a TrainingWorld,
    dt: f64,
    arity_violations: usize,
}

impl Flight<'_> {
    /// Advances one step and returns the detection declared in it, if any.
    fn advance(&mut self) -> Result<Option<(u64, usize)>> {
        let believed = self.sup.detected();
        let tick = self.sup.tick(&self.state)?;
        if tick.policy_outputs != believed.functional_count() || tick.active.mask() != believed {
            self.arity_violations += 1;
        }
        self.state = physics_step(&self.state, &tick, &self.physical, self.world, self.dt)?;
        Ok(tick
            .events
            .iter()
            .find(|e| e.kind == EventKind::FaultDetected)
            .map(|e| (tick.step, e.detail["propeller"].as_u64().unwrap_or(0) as usize)))
    }

    fn inject(&mut self, prop: usize) {
        self.physical = self.physical.fail(prop);
        self.sup.note_actual_failure(prop);
    }

    /// Runs until a detection or `deadline`, injecting `prop` at `at`.
    fn run_stage(&mut self, stage: FdStage, prop: usize, at: u64, deadline: u64) -> Result<StageOutcome> {
        let dt = self.dt;
        let mut out = StageOutcome {
            stage,
            failed_propeller: prop,
            injection_step: at,
            detection_step: None,
            detected_propeller: None,
            false_alarm: false,
            latency_s: None,
        };
        while self.sup.step() <= deadline {
            if self.sup.step() == at {
                self.inject(prop);
            }
            if let Some((step, detected)) = self.advance()? {
                out.detection_step = Some(step);
                out.detected_propeller = Some(detected);
                out.false_alarm = step < at;
                if !out.false_alarm {
                    out.latency_s = Some((step - at) as f64 * dt);
                }
                break;
            }
        }
        Ok(out)
    }
}

fn run_one(controllers: &ControllerSet, detectors: &FdModels, cfg: &DetectBenchConfig, seed: u64, run: usize) -> Result<DetectRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    let dt = cfg.supervisor.dt;
    let patience = (cfg.max_latency_s / dt).round() as u64;
    let [lo, hi] = cfg.injection_delay;

    let mut sup = Supervisor::new(controllers.clone(), detectors.clone(), cfg.world, cfg.supervisor.clone())?;
    let waypoint = Vector3::new(0.0, 0.0, cfg.height);
    sup.set_waypoint(waypoint);
    let mut flight = Flight {
        sup,
        state: QuadState::at(waypoint),
        physical: FaultMask::healthy(),
        world: &cfg.world,
        dt,
        arity_violations: 0,
    };

    let first_legal = |stage: FdStage| stage.warmup().max(stage.window()) as u64;
    let prop1 = rng.gen_range(1..=4);
    let at1 = first_legal(FdStage::FourToThree) + rng.gen_range(lo..=hi);
    let mut stages = vec![flight.run_stage(FdStage::FourToThree, prop1, at1, at1 + patience)?];

    let armed = flight.sup.active_stage() == Some(FdStage::ThreeToTwo);
    if cfg.second_stage && stages[0].correct() && armed {
        let d1 = stages[0].detection_step.expect("correct implies detected");
        let prop2 = opposite_propeller(prop1);
        let at2 = d1 + 1 + first_legal(FdStage::ThreeToTwo) + rng.gen_range(lo..=hi);
        stages.push(flight.run_stage(FdStage::ThreeToTwo, prop2, at2, at2 + patience)?);
    }
    let events = flight
        .sup
        .events()
        .iter()
        .filter(|e| e.kind != EventKind::WaypointSet)
        .cloned()
        .collect();
    Ok(DetectRun {
        run,
        stages,
        arity_violations: flight.arity_violations,
        events,
    })
}

/// Injects failures at random steps and measures how long the detectors
/// take to declare them. The ground is ignored so that every run yields a
/// latency; runs execute in parallel and are reported in run order.
pub fn detect_bench(controllers: &ControllerSet, detectors: &FdModels, cfg: &DetectBenchConfig, seed: u64) -> Result<DetectBenchReport> {
    if detectors.four_to_three.is_none() {
        return Err(Error::InvalidParameter("detect-bench needs a 4to3 detector".into()));
    }
    if cfg.injection_delay[0] > cfg.injection_delay[1] {
        return Err(Error::InvalidParameter("injection_delay must be an increasing pair".into()));
    }
    if !(cfg.max_latency_s > 0.0) {
        return Err(Error::InvalidParameter("max_latency_s must be > 0".into()));
    }
    let runs = (0..cfg.n_runs)
        .into_par_iter()
        .map(|r| run_one(controllers, detectors, cfg, seed, r))
        .collect::<Result<Vec<_>>>()?;
    let stages = [FdStage::FourToThree, FdStage::ThreeToTwo]
        .into_iter()
        .map(|stage| {
            let outcomes: Vec<&StageOutcome> = runs.iter().flat_map(|r| &r.stages).filter(|o| o.stage == stage).collect();
            stage_stats(stage, &outcomes)
        })
        .collect();
    Ok(DetectBenchReport {
        config_hash: config_hash(cfg),
        seed,
        config: cfg.clone(),
        stages,
        arity_violations: runs.iter().map(|r| r.arity_violations).sum(),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::tests::controllers;
    use crate::fd::FdModel;

    #[test]
    fn median_counts_misses_as_infinite() {
        assert_eq!(median_latency(&[Some(1.0), Some(3.0), None]), Some(3.0));
        assert_eq!(median_latency(&[Some(1.0), None, None]), None);
        assert_eq!(median_latency(&[Some(1.0), Some(2.0)]), Some(1.5));
        assert_eq!(median_latency(&[]), None);
    }

    #[test]
    fn report_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut fd = FdModels::default();
        fd.insert(FdModel::init(FdStage::FourToThree, &mut rng));
        fd.insert(FdModel::init(FdStage::ThreeToTwo, &mut rng));
        let cfg = DetectBenchConfig {
            n_runs: 2,
            injection_delay: [0, 20],
            max_latency_s: 0.5,
            ..Default::default()
        };
        let a = detect_bench(&controllers(3), &fd, &cfg, 9).unwrap();
        let b = detect_bench(&controllers(3), &fd, &cfg, 9).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.stages.len(), 2);
        assert_eq!(a.stages[0].stage, "4to3");
        assert_eq!(a.stages[1].stage, "3to2");
        assert_eq!(a.stages[0].runs, 2);
        assert_eq!(a.arity_violations, 0);
        for run in &a.runs {
            let s = &run.stages[0];
            assert!(s.injection_step >= 150 && s.injection_step <= 170);
            assert_eq!(s.false_alarm, s.detection_step.map_or(false, |d| d < s.injection_step));
        }
    }

    #[test]
    fn needs_first_stage_detector() {
        let err = detect_bench(&controllers(1), &FdModels::default(), &DetectBenchConfig::default(), 0);
        assert!(err.is_err());
    }
}
