use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{one_hot, FdStage, NONE_CLASS};
use crate::error::{Error, Result};
use crate::ppo::{combine_actions, policy_mean, ControllerBundle, Scenario, TrainingWorld};
use crate::sim::{flatten_state, opposite_propeller, sample_initial_state, step, InitMode, DEFAULT_DT, STATE_DIM};

const MAGIC: &[u8; 4] = b"FQFD";
const VERSION: u32 = 1;

/// One labelled window. Steps are 1-based; the window covers
/// `end_step − T_w + 1 ..= end_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct FdSample {
    /// `T_w × 18` waypoint-relative states, oldest first.
    pub window: Vec<f64>,
    pub label: usize,
    pub run: u32,
    pub end_step: u32,
    /// Step at which the propeller was cut in this run.
    pub injection_step: u32,
}

impl FdSample {
    pub fn label_one_hot(&self, classes: usize) -> Result<Vec<f64>> {
        one_hot(self.label, classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdDataset {
    pub stage: FdStage,
    pub samples: Vec<FdSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FdGenConfig {
    /// Waypoint height the vehicle holds, m.
    pub altitude: f64,
    pub init: InitMode,
    pub windows_per_run: usize,
    /// Injection happens this many steps after warm-up, drawn uniformly.
    pub inject_after_warmup: (usize, usize),
    /// Fault windows end within this many steps of the first clean one.
    pub fault_span: usize,
    pub world: TrainingWorld,
}

impl Default for FdGenConfig {
    fn default() -> Self {
        Self {
            altitude: 5.0,
            init: InitMode::Uniform,
            windows_per_run: 10,
            inject_after_warmup: (50, 250),
            fault_span: 100,
            world: TrainingWorld::default(),
        }
    }
}

impl FdDataset {
    pub fn classes(&self) -> usize {
        self.stage.classes()
    }

    pub fn window(&self) -> usize {
        self.stage.window()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes()];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    /// Checks shapes and that no window overlaps its run's injection step.
    pub fn validate(&self) -> Result<()> {
        let len = self.window() * STATE_DIM;
        for (i, s) in self.samples.iter().enumerate() {
            if s.window.len() != len {
                return Err(Error::ShapeMismatch {
                    what: format!("sample {i}"),
                    expected: len.to_string(),
                    found: s.window.len().to_string(),
                });
            }
            if s.label >= self.classes() {
                return Err(Error::ClassOutOfRange {
                    index: s.label,
                    classes: self.classes(),
                });
            }
            let start = s.end_step as usize + 1 - self.window();
            let clean = if s.label == NONE_CLASS {
                s.end_step < s.injection_step
            } else {
                start > s.injection_step as usize
            };
            if !clean {
                return Err(Error::Format(format!("sample {i} straddles the injection step")));
            }
        }
        Ok(())
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let name = self.stage.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(self.classes() as u32).to_le_bytes())?;
        w.write_all(&(self.window() as u32).to_le_bytes())?;
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        for s in &self.samples {
            for v in &s.window {
                w.write_all(&v.to_le_bytes())?;
            }
            for x in [s.label as u32, s.run, s.end_step, s.injection_step] {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_reader<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an FQFD dataset".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        if n > 64 {
            return Err(Error::Format("stage name too long".into()));
        }
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let stage: FdStage = String::from_utf8(name)
            .map_err(|_| Error::Format("stage name is not UTF-8".into()))?
            .parse()?;
        let classes = read_u32(&mut r)? as usize;
        let window = read_u32(&mut r)? as usize;
        if classes != stage.classes() || window != stage.window() {
            return Err(Error::Format(format!(
                "header C={classes}, T_w={window} does not match stage {stage}"
            )));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let mut window_data = vec![0.0; window * STATE_DIM];
            for v in window_data.iter_mut() {
                r.read_exact(&mut b8)?;
                *v = f64::from_le_bytes(b8);
            }
            samples.push(FdSample {
                window: window_data,
                label: read_u32(&mut r)? as usize,
                run: read_u32(&mut r)?,
                end_step: read_u32(&mut r)?,
                injection_step: read_u32(&mut r)?,
            });
        }
        let ds = Self { stage, samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.to_writer(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Flies `controller` from `init` at the waypoint, cutting `fail_prop` at
/// `inject` (1-based step). Returns the observation of every step 1..=steps.
/// The ground is ignored so every run has the same length.
fn fly(
    controller: &ControllerBundle,
    cfg: &FdGenConfig,
    rng: &mut ChaCha8Rng,
    fail_prop: usize,
    inject: usize,
    steps: usize,
) -> Result<Vec<[f64; STATE_DIM]>> {
    let waypoint = Vector3::new(0.0, 0.0, cfg.altitude);
    let believed = controller.mask();
    let mut physical = believed;
    let mut state = sample_initial_state(rng, cfg.init);
    state.position += waypoint;
    let mut obs = Vec::with_capacity(steps);
    for t in 1..=steps {
        if t == inject {
            physical = physical.fail(fail_prop);
        }
        let o = flatten_state(&state.relative_to(&waypoint));
        obs.push(o);
        let out = policy_mean(&controller.policy, &o)?;
        let c = combine_actions(&out, &believed, &state, &cfg.world.gains, &cfg.world.params)?;
        state = step(&state, &c.rotor, &c.extra(), &physical, &cfg.world.params, DEFAULT_DT)?;
    }
    Ok(obs)
}

fn pick_ends<R: Rng>(rng: &mut R, lo: usize, hi: usize, n: usize) -> Vec<usize> {
    let span = hi + 1 - lo;
    let mut v: Vec<usize> = sample(rng, span, n.min(span)).into_iter().map(|i| lo + i).collect();
    v.sort_unstable();
    v
}

/// Simulates `n_runs` failure runs under the pre-failure controllers and
/// harvests labelled windows.
///
/// For `4to3` every controller must be the healthy one and run `r` loses
/// propeller `1 + r mod 4`. For `3to2` controllers are three-propeller
/// bundles used in turn, and each run loses the propeller opposite the one
/// its controller already lacks. About `1/C` of each run's windows are
/// taken before the injection and labelled none; the rest start after it.
pub fn generate_fd_dataset(
    stage: FdStage,
    controllers: &[ControllerBundle],
    cfg: &FdGenConfig,
    n_runs: usize,
    seed: u64,
) -> Result<FdDataset> {
    if controllers.is_empty() {
        return Err(Error::InvalidParameter("no controllers given".into()));
    }
    for c in controllers {
        c.check()?;
        let ok = match stage {
            FdStage::FourToThree => c.scenario == Scenario::FourProp,
            FdStage::ThreeToTwo => matches!(c.scenario, Scenario::ThreeProp { .. }),
        };
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "{} controller cannot generate {stage} data",
                c.scenario
            )));
        }
    }
    let (lo, hi) = cfg.inject_after_warmup;
    if lo < 1 || hi < lo || cfg.windows_per_run < stage.classes() || cfg.fault_span == 0 {
        return Err(Error::InvalidParameter("inconsistent dataset generation settings".into()));
    }
    let (window, warmup, classes) = (stage.window(), stage.warmup(), stage.classes());

    let runs: Vec<Vec<FdSample>> = (0..n_runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let controller = &controllers[r % controllers.len()];
            let (fail_prop, label) = match stage {
                FdStage::FourToThree => {
                    let p = 1 + r % 4;
                    (p, p)
                }
                FdStage::ThreeToTwo => {
                    let gone = controller.mask().failed()[0];
                    (opposite_propeller(gone), 1)
                }
            };
            let inject = warmup + rng.gen_range(lo..=hi);
            let first_clean = inject + window;
            let steps = first_clean + cfg.fault_span - 1;
            let obs = fly(controller, cfg, &mut rng, fail_prop, inject, steps)?;

            let n_none = (cfg.windows_per_run + classes / 2) / classes;
            let n_fault = cfg.windows_per_run - n_none;
            let none_ends = pick_ends(&mut rng, warmup + 1, inject - 1, n_none);
            let fault_ends = pick_ends(&mut rng, first_clean, steps, n_fault);
            let cut = |end: usize, label: usize| FdSample {
                window: obs[end - window..end].iter().flatten().copied().collect(),
                label,
                run: r as u32,
                end_step: end as u32,
                injection_step: inject as u32,
            };
            Ok(none_ends
                .into_iter()
                .map(|e| cut(e, NONE_CLASS))
                .chain(fault_ends.into_iter().map(|e| cut(e, label)))
                .collect())
        })
        .collect::<Result<_>>()?;

    let ds = FdDataset {
        stage,
        samples: runs.into_iter().flatten().collect(),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppo::ControllerBundle;

    fn controller(s: Scenario) -> ControllerBundle {
        ControllerBundle::init(s, &mut ChaCha8Rng::seed_from_u64(5))
    }

    fn small(stage: FdStage, seed: u64) -> FdDataset {
        let ctrl = match stage {
            FdStage::FourToThree => vec![controller(Scenario::FourProp)],
            FdStage::ThreeToTwo => (1..=4).map(|k| controller(Scenario::ThreeProp { failed: k })).collect(),
        };
        generate_fd_dataset(stage, &ctrl, &FdGenConfig::default(), 8, seed).unwrap()
    }

    #[test]
    fn five_balanced_classes() {
        let ds = small(FdStage::FourToThree, 3);
        assert_eq!(ds.classes(), 5);
        assert_eq!(ds.samples.len(), 80);
        let counts = ds.class_counts();
        for c in &counts {
            assert!(*c as f64 >= 0.1 * ds.samples.len() as f64, "{counts:?}");
        }
        for s in &ds.samples {
            assert_eq!(s.label_one_hot(5).unwrap().iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn windows_never_straddle_injection() {
        for stage in [FdStage::FourToThree, FdStage::ThreeToTwo] {
            let ds = small(stage, 9);
            ds.validate().unwrap();
            for s in &ds.samples {
                let start = s.end_step - stage.window() as u32 + 1;
                if s.label == NONE_CLASS {
                    assert!(s.end_step < s.injection_step);
                    assert!(s.end_step as usize > stage.warmup());
                } else {
                    assert!(start > s.injection_step);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = small(FdStage::FourToThree, 4);
        let b = small(FdStage::FourToThree, 4);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.to_writer(&mut x).unwrap();
        b.to_writer(&mut y).unwrap();
        assert_eq!(x, y);
        assert_ne!(a, small(FdStage::FourToThree, 5));
    }

    #[test]
    fn file_round_trip() {
        let ds = small(FdStage::ThreeToTwo, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.fqfd");
        ds.write(&p).unwrap();
        let back = FdDataset::read(&p).unwrap();
        assert_eq!(back, ds);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"FQFD");
        assert!(FdDataset::from_reader(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FdDataset::from_reader(bad.as_slice()).is_err());
    }

    #[test]
    fn wrong_controller_rejected() {
        let c = controller(Scenario::ThreeProp { failed: 1 });
        assert!(generate_fd_dataset(FdStage::FourToThree, &[c], &FdGenConfig::default(), 2, 0).is_err());
    }
}
