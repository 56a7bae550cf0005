//! Scripted flights on top of the supervisor: waypoint tracking, detection
//! latency benchmarks and crash-rate sweeps.

mod detect;
mod failure_rate;
mod trajectory;

pub use detect::{detect_bench, DetectBenchConfig, DetectBenchReport, DetectRun, StageOutcome, StageStats};
pub use failure_rate::{failure_rate, FailureMode, FailureRateConfig, FailureRateReport, FailureRateRow};
pub use trajectory::{TrajectoryLog, TrajectoryRow};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::FdStage;
use crate::ppo::{reward, Scenario, TrainingWorld};
use crate::sim::{step, FaultMask, QuadState};
use crate::supervisor::{ControllerSet, Event, EventKind, FdModels, Supervisor, SupervisorConfig, Tick};

/// A propeller failure to inject. Without `step` the step is drawn from the
/// seed, after the detector warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureInjection {
    pub propeller: usize,
    #[serde(default)]
    pub step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Fault configuration at take-off; selects the starting controller.
    pub scenario: Scenario,
    pub start: [f64; 3],
    pub target_height: f64,
    pub waypoint_shift_time_s: Option<f64>,
    pub waypoint_shift: [f64; 3],
    pub failure: Option<FailureInjection>,
    pub duration_s: f64,
    /// Error metrics ignore the first part of the flight.
    pub metrics_after_s: f64,
    pub supervisor: SupervisorConfig,
    pub world: TrainingWorld,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::FourProp,
            start: [0.0; 3],
            target_height: 5.0,
            waypoint_shift_time_s: Some(10.0),
            waypoint_shift: [0.0, 1.0, 0.0],
            failure: None,
            duration_s: 20.0,
            metrics_after_s: 5.0,
            supervisor: SupervisorConfig::default(),
            world: TrainingWorld::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn steps(&self) -> u64 {
        (self.duration_s / self.supervisor.dt).round() as u64
    }

    fn step_at(&self, t: f64) -> u64 {
        (t / self.supervisor.dt).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::InvalidParameter(format!("duration must be > 0, got {}", self.duration_s)));
        }
        if !(self.supervisor.dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {}", self.supervisor.dt)));
        }
        if let Some(f) = self.failure {
            if !(1..=4).contains(&f.propeller) || !self.scenario.mask().is_functional(f.propeller) {
                return Err(Error::InvalidParameter(format!(
                    "propeller {} is not a working propeller of {}",
                    f.propeller, self.scenario
                )));
            }
            match f.step {
                Some(s) if s >= self.steps() => {
                    return Err(Error::InvalidParameter(format!(
                        "injection step {s} not before the last step {}",
                        self.steps()
                    )))
                }
                None if self.steps() <= self.random_injection_floor() => {
                    return Err(Error::InvalidParameter("flight too short for a random injection step".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn random_injection_floor(&self) -> u64 {
        let stage = match self.scenario.mask().functional_count() {
            4 => FdStage::FourToThree,
            _ => FdStage::ThreeToTwo,
        };
        stage.warmup().max(stage.window()) as u64 + 1
    }
}

/// Error summary over the part of the flight after `metrics_after_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackMetrics {
    pub max_abs_x_error: f64,
    pub max_abs_y_error: f64,
    pub max_abs_z_error: f64,
    pub final_position_error: f64,
    pub mean_abs_yaw_rate: f64,
    pub crashed: bool,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrackResult {
    pub log: TrajectoryLog,
    pub events: Vec<Event>,
    pub metrics: TrackMetrics,
    pub injection_step: Option<u64>,
}

fn rotor_row(tick: &Tick, physical: &FaultMask) -> [f64; 4] {
    std::array::from_fn(|i| if physical.functional[i] { tick.control.rotor.speeds[i] } else { 0.0 })
}

fn physics_step(state: &QuadState, tick: &Tick, physical: &FaultMask, world: &TrainingWorld, dt: f64) -> Result<QuadState> {
    step(state, &tick.control.rotor, &tick.control.extra(), physical, &world.params, dt)
}

/// Flies the supervisor from `start` to the target height, optionally
/// shifting the waypoint and injecting a failure. The run stops early when
/// the vehicle goes below the ground plane.
pub fn run_track(controllers: &ControllerSet, detectors: &FdModels, cfg: &ScenarioConfig, seed: u64) -> Result<TrackResult> {
    cfg.validate()?;
    let dt = cfg.supervisor.dt;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.steps();
    let injection = cfg.failure.map(|f| {
        let s = f.step.unwrap_or_else(|| rng.gen_range(cfg.random_injection_floor()..n));
        (f.propeller, s)
    });
    let shift_step = cfg.waypoint_shift_time_s.map(|t| cfg.step_at(t));

    let mut sup = Supervisor::with_detected(
        controllers.clone(),
        detectors.clone(),
        cfg.world,
        cfg.supervisor.clone(),
        cfg.scenario.mask(),
    )?;
    let mut waypoint = Vector3::new(0.0, 0.0, cfg.target_height);
    sup.set_waypoint(waypoint);
    let mut physical = cfg.scenario.mask();
    let mut state = QuadState::at(Vector3::from(cfg.start));
    let mut rows = Vec::with_capacity(n as usize);
    let mut crashed = false;
    for k in 0..n {
        if injection.map(|(_, s)| s) == Some(k) {
            let prop = injection.unwrap().0;
            physical = physical.fail(prop);
            sup.note_actual_failure(prop);
        }
        if shift_step == Some(k) {
            waypoint += Vector3::from(cfg.waypoint_shift);
            sup.set_waypoint(waypoint);
        }
        let tick = sup.tick(&state)?;
        rows.push(TrajectoryRow::new(
            k as f64 * dt,
            &state,
            rotor_row(&tick, &physical),
            tick.active,
            reward(&state.relative_to(&waypoint)),
        ));
        state = physics_step(&state, &tick, &physical, &cfg.world, dt)?;
        if state.position.z < 0.0 {
            crashed = true;
            sup.record(EventKind::Crash, serde_json::json!({ "z": state.position.z }));
            break;
        }
    }
    let log = TrajectoryLog { rows };
    let metrics = track_metrics(&log, cfg, crashed);
    Ok(TrackResult {
        log,
        events: sup.events().to_vec(),
        metrics,
        injection_step: injection.map(|(_, s)| s),
    })
}

fn track_metrics(log: &TrajectoryLog, cfg: &ScenarioConfig, crashed: bool) -> TrackMetrics {
    let shift_t = cfg.waypoint_shift_time_s.unwrap_or(f64::INFINITY);
    let waypoint_at = |t: f64| {
        let mut w = Vector3::new(0.0, 0.0, cfg.target_height);
        if t >= shift_t - 1e-9 {
            w += Vector3::from(cfg.waypoint_shift);
        }
        w
    };
    let mut m = TrackMetrics {
        max_abs_x_error: 0.0,
        max_abs_y_error: 0.0,
        max_abs_z_error: 0.0,
        final_position_error: f64::NAN,
        mean_abs_yaw_rate: f64::NAN,
        crashed,
        steps: log.rows.len(),
    };
    let mut wz_sum = 0.0;
    let mut count = 0usize;
    for r in log.rows.iter().filter(|r| r.t_s >= cfg.metrics_after_s - 1e-9) {
        let e = Vector3::new(r.x, r.y, r.z) - waypoint_at(r.t_s);
        m.max_abs_x_error = m.max_abs_x_error.max(e.x.abs());
        m.max_abs_y_error = m.max_abs_y_error.max(e.y.abs());
        m.max_abs_z_error = m.max_abs_z_error.max(e.z.abs());
        wz_sum += r.wz.abs();
        count += 1;
    }
    if count > 0 {
        m.mean_abs_yaw_rate = wz_sum / count as f64;
    }
    if let Some(r) = log.rows.last() {
        m.final_position_error = (Vector3::new(r.x, r.y, r.z) - waypoint_at(r.t_s)).norm();
    }
    m
}
