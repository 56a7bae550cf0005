//! Sliding-window LSTM fault detection.
//!
//! Two stages: `4to3` watches a healthy vehicle for the loss of any one
//! propeller (classes none, prop1..prop4); `3to2` watches a three-propeller
//! vehicle for the loss of the propeller opposite the one already gone
//! (classes none, opposing-failed).

mod dataset;
mod train;

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{load_weights, lstm_forward, save_weights, LstmParams, OptimizerConfig, OptimizerMode};
use crate::sim::STATE_DIM;

pub use dataset::{generate_fd_dataset, FdDataset, FdGenConfig, FdSample};
pub use train::{fd_accuracy, train_fd, FdEpochStats, FdTrainConfig, FdTrainReport};

/// Index of the "no fault" class in both stages.
pub const NONE_CLASS: usize = 0;
/// Consecutive agreeing classifications needed to declare a fault.
pub const DEFAULT_PERSISTENCE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FdStage {
    FourToThree,
    ThreeToTwo,
}

impl FdStage {
    pub fn name(&self) -> &'static str {
        match self {
            FdStage::FourToThree => "4to3",
            FdStage::ThreeToTwo => "3to2",
        }
    }

    /// Window length in control steps.
    pub fn window(&self) -> usize {
        match self {
            FdStage::FourToThree => 100,
            FdStage::ThreeToTwo => 200,
        }
    }

    /// Steps skipped after the window starts before classification is allowed.
    pub fn warmup(&self) -> usize {
        match self {
            FdStage::FourToThree => 150,
            FdStage::ThreeToTwo => 250,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            FdStage::FourToThree => 5,
            FdStage::ThreeToTwo => 2,
        }
    }

    pub fn hidden(&self) -> [usize; 2] {
        match self {
            FdStage::FourToThree => [96, 64],
            FdStage::ThreeToTwo => [96, 32],
        }
    }

    pub fn default_optimizer(&self) -> OptimizerConfig {
        match self {
            FdStage::FourToThree => OptimizerConfig {
                mode: OptimizerMode::momentum(),
                learning_rate: 1e-4,
            },
            FdStage::ThreeToTwo => OptimizerConfig::adam(1e-4),
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> LstmParams {
        LstmParams::init(STATE_DIM, &self.hidden(), self.classes(), rng)
    }

    /// Human-readable class name, e.g. `prop3`.
    pub fn class_name(&self, class: usize) -> String {
        match (self, class) {
            (_, NONE_CLASS) => "none".into(),
            (FdStage::FourToThree, k) => format!("prop{k}"),
            (FdStage::ThreeToTwo, _) => "opposing-failed".into(),
        }
    }
}

impl fmt::Display for FdStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FdStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "4to3" => Ok(FdStage::FourToThree),
            "3to2" => Ok(FdStage::ThreeToTwo),
            _ => Err(Error::InvalidParameter(format!(
                "unknown detection stage {s:?}; expected 4to3 or 3to2"
            ))),
        }
    }
}

impl TryFrom<String> for FdStage {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FdStage> for String {
    fn from(s: FdStage) -> String {
        s.name().into()
    }
}

pub fn one_hot(index: usize, classes: usize) -> Result<Vec<f64>> {
    if index >= classes {
        return Err(Error::ClassOutOfRange { index, classes });
    }
    let mut v = vec![0.0; classes];
    v[index] = 1.0;
    Ok(v)
}

pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate() {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

/// Ring buffer of the most recent flattened states. Steps are counted from
/// the first push, so a window created mid-flight has its own warm-up.
#[derive(Debug, Clone, PartialEq)]
pub struct StateWindow {
    capacity: usize,
    warmup: usize,
    buf: VecDeque<[f64; STATE_DIM]>,
    steps: u64,
}

impl StateWindow {
    pub fn new(capacity: usize, warmup: usize) -> Self {
        Self {
            capacity,
            warmup,
            buf: VecDeque::with_capacity(capacity),
            steps: 0,
        }
    }

    pub fn for_stage(stage: FdStage) -> Self {
        Self::new(stage.window(), stage.warmup())
    }

    pub fn push(&mut self, state: &[f64; STATE_DIM]) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(*state);
        self.steps += 1;
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of states pushed so far; the latest state is this step.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn is_full(&self) -> bool {
        self.buf.len() == self.capacity
    }

    /// First step at which classification is allowed.
    pub fn first_legal_step(&self) -> u64 {
        (self.warmup as u64 + 1).max(self.capacity as u64)
    }

    pub fn is_ready(&self) -> bool {
        self.is_full() && self.steps >= self.first_legal_step()
    }

    /// Oldest state first, `capacity × 18` values.
    pub fn flatten(&self) -> Vec<f64> {
        self.buf.iter().flatten().copied().collect()
    }
}

/// A trained detector for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FdModel {
    pub stage: FdStage,
    pub params: LstmParams,
}

impl FdModel {
    pub fn init<R: Rng + ?Sized>(stage: FdStage, rng: &mut R) -> Self {
        Self {
            stage,
            params: stage.init_params(rng),
        }
    }

    pub fn new(stage: FdStage, params: LstmParams) -> Result<Self> {
        let m = Self { stage, params };
        m.check()?;
        Ok(m)
    }

    pub fn check(&self) -> Result<()> {
        let expected = (STATE_DIM, self.stage.hidden().to_vec(), self.stage.classes());
        let found = (self.params.n_in(), self.params.hidden_sizes(), self.params.n_classes());
        if expected != found {
            return Err(Error::ShapeMismatch {
                what: format!("{} detector", self.stage),
                expected: format!("{expected:?}"),
                found: format!("{found:?}"),
            });
        }
        Ok(())
    }

    pub fn file_name(stage: FdStage) -> String {
        format!("fd-{stage}.fqnn")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_weights(&self.params, path)
    }

    /// Loads a detector; the stage is recovered from the class count.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let params: LstmParams = load_weights(path)?;
        let stage = match params.n_classes() {
            5 => FdStage::FourToThree,
            2 => FdStage::ThreeToTwo,
            n => return Err(Error::Format(format!("detector with {n} classes"))),
        };
        Self::new(stage, params)
    }
}

/// Class probabilities for the current window.
pub fn fd_classify(model: &FdModel, window: &StateWindow) -> Result<Vec<f64>> {
    if window.capacity() != model.stage.window() {
        return Err(Error::ShapeMismatch {
            what: "detector window".into(),
            expected: model.stage.window().to_string(),
            found: window.capacity().to_string(),
        });
    }
    if !window.is_ready() {
        return Err(Error::WindowNotReady {
            step: window.steps(),
            first_legal: window.first_legal_step(),
        });
    }
    lstm_forward(&model.params, &window.flatten(), model.stage.window())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub class: usize,
    pub detection_step: u64,
}

/// Declares a fault once the same non-none class has been the argmax for
/// `k` consecutive classifications. Fires at most once.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceFilter {
    k: usize,
    run: Option<(usize, usize)>,
    fired: bool,
}

impl PersistenceFilter {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("persistence must be at least 1".into()));
        }
        Ok(Self {
            k,
            run: None,
            fired: false,
        })
    }

    pub fn push(&mut self, step: u64, q: &[f64]) -> Option<FaultEvent> {
        if self.fired {
            return None;
        }
        let class = argmax(q);
        let count = match self.run {
            Some((c, n)) if c == class => n + 1,
            _ => 1,
        };
        self.run = Some((class, count));
        if class != NONE_CLASS && count >= self.k {
            self.fired = true;
            return Some(FaultEvent {
                class,
                detection_step: step,
            });
        }
        None
    }

    /// Forget the current run of agreements, e.g. after a missed step.
    pub fn reset(&mut self) {
        self.run = None;
    }
}

/// Runs a persistence filter over a stream of `(step, Q)` pairs.
pub fn fd_decide<I, Q>(stream: I, k: usize) -> Result<Option<FaultEvent>>
where
    I: IntoIterator<Item = (u64, Q)>,
    Q: AsRef<[f64]>,
{
    let mut filter = PersistenceFilter::new(k)?;
    for (step, q) in stream {
        if let Some(e) = filter.push(step, q.as_ref()) {
            return Ok(Some(e));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(2, 5).unwrap(), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(one_hot(0, 2).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(one_hot(5, 5), Err(Error::ClassOutOfRange { index: 5, classes: 5 })));
    }

    fn q(class: usize, c: usize) -> Vec<f64> {
        let mut v = vec![0.1 / c as f64; c];
        v[class] += 0.9;
        v
    }

    #[test]
    fn all_none_never_fires() {
        let stream = (1..500u64).map(|s| (s, q(NONE_CLASS, 5)));
        assert_eq!(fd_decide(stream, 10).unwrap(), None);
    }

    #[test]
    fn fires_on_kth_agreement() {
        let s = 200u64;
        let stream = (151..400u64).map(|t| (t, if t < s { q(0, 5) } else { q(2, 5) }));
        assert_eq!(
            fd_decide(stream, 10).unwrap(),
            Some(FaultEvent {
                class: 2,
                detection_step: s + 9
            })
        );
    }

    #[test]
    fn alternating_classes_never_fire() {
        let stream = (1..1000u64).map(|t| (t, q(1 + (t % 2) as usize, 5)));
        assert_eq!(fd_decide(stream, 10).unwrap(), None);
    }

    #[test]
    fn k_one_fires_immediately_and_zero_rejected() {
        let e = fd_decide([(7u64, q(3, 5))], 1).unwrap().unwrap();
        assert_eq!(e.detection_step, 7);
        assert!(PersistenceFilter::new(0).is_err());
    }

    #[test]
    fn warm_up_gates_classification() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stage, first) in [(FdStage::FourToThree, 151u64), (FdStage::ThreeToTwo, 251)] {
            let model = FdModel::init(stage, &mut rng);
            let mut w = StateWindow::for_stage(stage);
            assert_eq!(w.first_legal_step(), first);
            for step in 1..=first {
                w.push(&[0.01 * step as f64; STATE_DIM]);
                let r = fd_classify(&model, &w);
                if step < first {
                    assert!(
                        matches!(r, Err(Error::WindowNotReady { step: s, first_legal }) if s == step && first_legal == first)
                    );
                } else {
                    let p = r.unwrap();
                    assert_eq!(p.len(), stage.classes());
                    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn window_keeps_latest_states_in_order() {
        let mut w = StateWindow::new(3, 0);
        for i in 0..5 {
            w.push(&[i as f64; STATE_DIM]);
        }
        let flat = w.flatten();
        assert_eq!(flat.len(), 3 * STATE_DIM);
        assert_eq!((flat[0], flat[STATE_DIM], flat[2 * STATE_DIM]), (2.0, 3.0, 4.0));
    }

    #[test]
    fn model_round_trip_recovers_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stage in [FdStage::FourToThree, FdStage::ThreeToTwo] {
            let m = FdModel::init(stage, &mut rng);
            let p = dir.path().join(FdModel::file_name(stage));
            m.save(&p).unwrap();
            assert_eq!(FdModel::load(&p).unwrap(), m);
        }
    }

    #[test]
    fn wrong_shape_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = FdStage::ThreeToTwo.init_params(&mut rng);
        assert!(FdModel::new(FdStage::FourToThree, params).is_err());
    }
}
