//! Runtime loop: flies the active controller, feeds the fault detectors and
//! switches controllers when a failure is declared.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::fd::{fd_classify, FdModel, FdStage, PersistenceFilter, StateWindow, DEFAULT_PERSISTENCE};
use crate::ppo::{combine_actions, policy_mean, ControlOutput, ControllerBundle, Scenario, TrainingWorld};
use crate::sim::{flatten_state, opposite_propeller, FaultMask, QuadState, DEFAULT_DT};

pub const OFFSET_WINDOW: usize = 15;

/// Mean of the last `min(window, len)` entries of `history` added to
/// `actual`. An empty history leaves `actual` unchanged.
pub fn offset_correction(history: &VecDeque<Vector3<f64>>, window: usize, actual: &Vector3<f64>) -> Vector3<f64> {
    let n = history.len().min(window);
    if n == 0 {
        return *actual;
    }
    let sum: Vector3<f64> = history.iter().rev().take(n).sum();
    actual + sum / n as f64
}

/// One controller bundle per fault configuration.
#[derive(Debug, Clone, Default)]
pub struct ControllerSet {
    bundles: Vec<ControllerBundle>,
}

impl ControllerSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `bundle`, replacing any bundle for the same scenario.
    pub fn insert(&mut self, bundle: ControllerBundle) {
        self.bundles.retain(|b| b.scenario != bundle.scenario);
        self.bundles.push(bundle);
    }

    pub fn get(&self, mask: &FaultMask) -> Option<&ControllerBundle> {
        let scenario = Scenario::from_mask(mask).ok()?;
        self.bundles.iter().find(|b| b.scenario == scenario)
    }

    pub fn scenarios(&self) -> Vec<Scenario> {
        self.bundles.iter().map(|b| b.scenario).collect()
    }

    /// Loads every bundle found in `dir`. Missing configurations are skipped.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut set = Self::new();
        for mask in FaultMask::all_supported() {
            let scenario = Scenario::from_mask(&mask)?;
            let (policy, _, _) = ControllerBundle::paths(dir, scenario);
            if policy.exists() {
                set.insert(ControllerBundle::load(dir, scenario)?.0);
            }
        }
        Ok(set)
    }
}

/// Fault detectors for both stages; either may be absent.
#[derive(Debug, Clone, Default)]
pub struct FdModels {
    pub four_to_three: Option<FdModel>,
    pub three_to_two: Option<FdModel>,
}

impl FdModels {
    pub fn get(&self, stage: FdStage) -> Option<&FdModel> {
        match stage {
            FdStage::FourToThree => self.four_to_three.as_ref(),
            FdStage::ThreeToTwo => self.three_to_two.as_ref(),
        }
    }

    pub fn insert(&mut self, model: FdModel) {
        match model.stage {
            FdStage::FourToThree => self.four_to_three = Some(model),
            FdStage::ThreeToTwo => self.three_to_two = Some(model),
        }
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut models = Self::default();
        for stage in [FdStage::FourToThree, FdStage::ThreeToTwo] {
            let path = dir.join(FdModel::file_name(stage));
            if path.exists() {
                let model = FdModel::load(&path)?;
                if model.stage != stage {
                    return Err(Error::Format(format!("{} holds a {} model", path.display(), model.stage)));
                }
                models.insert(model);
            }
        }
        Ok(models)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisorConfig {
    pub persistence: usize,
    pub offset_window: usize,
    pub offset_correction: bool,
    pub dt: f64,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            persistence: DEFAULT_PERSISTENCE,
            offset_window: OFFSET_WINDOW,
            offset_correction: true,
            dt: DEFAULT_DT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    WaypointSet,
    FailureInjected,
    FaultDetected,
    ControllerSwitched,
    UnrecoverableFault,
    Crash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: u64,
    pub time_s: f64,
    #[serde(rename = "type")]
    pub kind: EventKind,
    pub detail: Value,
}

/// Writes one JSON object per line.
pub fn write_events<W: Write>(mut w: W, events: &[Event]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events(text: &str) -> Result<Vec<Event>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone)]
struct ActiveDetector {
    stage: FdStage,
    window: StateWindow,
    filter: PersistenceFilter,
}

/// Result of one control step.
#[derive(Debug, Clone)]
pub struct Tick {
    pub step: u64,
    pub control: ControlOutput,
    /// Number of policy outputs used this step.
    pub policy_outputs: usize,
    pub active: Scenario,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone)]
pub struct Supervisor {
    controllers: ControllerSet,
    detectors: FdModels,
    world: TrainingWorld,
    config: SupervisorConfig,
    waypoint: Vector3<f64>,
    detected: FaultMask,
    active: Scenario,
    detector: Option<ActiveDetector>,
    history: VecDeque<Vector3<f64>>,
    step: u64,
    actual_failures: Vec<(usize, u64)>,
    events: Vec<Event>,
    pending: Vec<Event>,
    unrecoverable: bool,
}

impl Supervisor {
    /// Starts healthy with the 4-prop controller and the 4→3 detector (if any).
    pub fn new(controllers: ControllerSet, detectors: FdModels, world: TrainingWorld, config: SupervisorConfig) -> Result<Self> {
        Self::with_detected(controllers, detectors, world, config, FaultMask::healthy())
    }

    /// Starts from an already known fault configuration. With one failure
    /// the 3→2 detector is armed immediately.
    pub fn with_detected(
        controllers: ControllerSet,
        detectors: FdModels,
        world: TrainingWorld,
        config: SupervisorConfig,
        detected: FaultMask,
    ) -> Result<Self> {
        world.params.validate()?;
        if !(config.dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {}", config.dt)));
        }
        PersistenceFilter::new(config.persistence)?;
        let bundle = controllers
            .get(&detected)
            .ok_or_else(|| Error::InvalidParameter(format!("no controller loaded for {detected}")))?;
        let active = bundle.scenario;
        let mut sup = Self {
            controllers,
            detectors,
            world,
            config,
            waypoint: Vector3::zeros(),
            detected,
            active,
            detector: None,
            history: VecDeque::new(),
            step: 0,
            actual_failures: Vec::new(),
            events: Vec::new(),
            pending: Vec::new(),
            unrecoverable: false,
        };
        sup.arm_detector()?;
        Ok(sup)
    }

    fn arm_detector(&mut self) -> Result<()> {
        let stage = match self.detected.functional_count() {
            4 => Some(FdStage::FourToThree),
            3 => Some(FdStage::ThreeToTwo),
            _ => None,
        };
        self.detector = match stage.filter(|s| self.detectors.get(*s).is_some()) {
            Some(stage) => Some(ActiveDetector {
                stage,
                window: StateWindow::for_stage(stage),
                filter: PersistenceFilter::new(self.config.persistence)?,
            }),
            None => None,
        };
        Ok(())
    }

    fn emit(&mut self, kind: EventKind, detail: Value) {
        let e = Event {
            step: self.step,
            time_s: self.step as f64 * self.config.dt,
            kind,
            detail,
        };
        self.events.push(e.clone());
        self.pending.push(e);
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn time_s(&self) -> f64 {
        self.step as f64 * self.config.dt
    }

    pub fn waypoint(&self) -> Vector3<f64> {
        self.waypoint
    }

    pub fn detected(&self) -> FaultMask {
        self.detected
    }

    pub fn active(&self) -> Scenario {
        self.active
    }

    pub fn active_stage(&self) -> Option<FdStage> {
        self.detector.as_ref().map(|d| d.stage)
    }

    pub fn is_unrecoverable(&self) -> bool {
        self.unrecoverable
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn world(&self) -> &TrainingWorld {
        &self.world
    }

    /// Moves the waypoint and clears the offset history.
    pub fn set_waypoint(&mut self, p: Vector3<f64>) {
        self.waypoint = p;
        self.history.clear();
        self.emit(EventKind::WaypointSet, json!({ "waypoint": [p.x, p.y, p.z] }));
    }

    /// Ground truth from the simulation harness, used only for logging.
    pub fn note_actual_failure(&mut self, prop: usize) {
        self.actual_failures.push((prop, self.step));
        self.emit(EventKind::FailureInjected, json!({ "propeller": prop }));
    }

    /// Logs an event produced outside the supervisor at the current step.
    pub fn record(&mut self, kind: EventKind, detail: Value) {
        self.emit(kind, detail);
    }

    /// Policy input for `true_state`: waypoint frame with offset correction
    /// on the position channels.
    pub fn observation(&self, true_state: &QuadState) -> QuadState {
        let mut rel = true_state.relative_to(&self.waypoint);
        if self.config.offset_correction {
            rel.position = offset_correction(&self.history, self.config.offset_window, &rel.position);
        }
        rel
    }

    /// One control step. The returned control is meant for the physics step
    /// from the current state; a switch decided here applies from the next
    /// tick on.
    pub fn tick(&mut self, true_state: &QuadState) -> Result<Tick> {
        let rel = true_state.relative_to(&self.waypoint);
        self.history.push_back(rel.position);
        while self.history.len() > self.config.offset_window.max(1) {
            self.history.pop_front();
        }
        let obs = self.observation(true_state);

        let bundle = self.controllers.get(&self.detected).expect("active controller present");
        let out = policy_mean(&bundle.policy, &flatten_state(&obs))?;
        let expected = self.detected.functional_count();
        if out.len() != expected {
            return Err(Error::Arity {
                expected,
                found: out.len(),
            });
        }
        let control = combine_actions(&out, &self.detected, true_state, &self.world.gains, &self.world.params)?;
        let policy_outputs = out.len();
        let active = self.active;

        let rel_flat = flatten_state(&rel);
        let detection = match self.detector.as_mut() {
            Some(d) => {
                d.window.push(&rel_flat);
                if d.window.is_ready() {
                    let model = self.detectors.get(d.stage).expect("armed detector has a model");
                    let q = fd_classify(model, &d.window)?;
                    d.filter.push(self.step, &q).map(|e| (d.stage, e.class, q))
                } else {
                    None
                }
            }
            None => None,
        };
        if let Some((stage, class, q)) = detection {
            self.on_detection(stage, class, &q);
        }

        let tick = Tick {
            step: self.step,
            control,
            policy_outputs,
            active,
            events: std::mem::take(&mut self.pending),
        };
        self.step += 1;
        Ok(tick)
    }

    fn failed_prop_for(&self, stage: FdStage, class: usize) -> usize {
        match stage {
            FdStage::FourToThree => class,
            FdStage::ThreeToTwo => opposite_propeller(self.detected.failed()[0]),
        }
    }

    fn on_detection(&mut self, stage: FdStage, class: usize, q: &[f64]) {
        let prop = self.failed_prop_for(stage, class);
        let failure = self
            .actual_failures
            .iter()
            .rev()
            .find(|(p, _)| *p == prop)
            .or(self.actual_failures.last())
            .copied();
        self.emit(
            EventKind::FaultDetected,
            json!({
                "stage": stage.name(),
                "class": stage.class_name(class),
                "propeller": prop,
                "confidence": q[class],
            }),
        );
        let next = self.detected.fail(prop);
        self.apply_detected(next, failure.map(|(_, s)| s));
    }

    /// Applies a newly detected fault configuration: switches to its
    /// controller, or emits an unrecoverable-fault event and keeps flying
    /// the current one when no controller can handle it.
    pub fn apply_detected(&mut self, next: FaultMask, failure_step: Option<u64>) {
        let grows = self.detected.failed().iter().all(|p| !next.is_functional(*p))
            && next.functional_count() < self.detected.functional_count();
        if !grows || !next.is_supported() || self.controllers.get(&next).is_none() {
            let reason = if !grows {
                "detected faults may only grow"
            } else if !next.is_supported() {
                "unsupported fault configuration"
            } else {
                "no controller for fault configuration"
            };
            self.unrecoverable = true;
            self.detector = None;
            self.emit(
                EventKind::UnrecoverableFault,
                json!({ "detected_mask": next.to_string(), "reason": reason }),
            );
            return;
        }
        let from = self.active;
        let to = Scenario::from_mask(&next).expect("supported mask");
        self.detected = next;
        self.active = to;
        self.emit(
            EventKind::ControllerSwitched,
            json!({
                "from": from.file_stem(),
                "to": to.file_stem(),
                "detected_mask": next.to_string(),
                "failure_step": failure_step,
                "detection_step": self.step,
            }),
        );
        if self.arm_detector().is_err() {
            self.detector = None;
        }
    }
}
