use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OptimizerMode {
    Sgd,
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerMode {
    pub fn momentum() -> Self {
        OptimizerMode::SgdMomentum { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerMode::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub mode: OptimizerMode,
    pub learning_rate: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            mode: OptimizerMode::Sgd,
            learning_rate,
        }
    }

    pub fn momentum(learning_rate: f64) -> Self {
        Self {
            mode: OptimizerMode::momentum(),
            learning_rate,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            mode: OptimizerMode::adam(),
            learning_rate,
        }
    }
}

/// Optimizer with per-tensor moment buffers, allocated on the first step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn ensure_buffers(&mut self, shapes: &[usize]) -> Result<()> {
        if self.first.is_empty() {
            self.first = shapes.iter().map(|&n| vec![0.0; n]).collect();
            if matches!(self.config.mode, OptimizerMode::Adam { .. }) {
                self.second = shapes.iter().map(|&n| vec![0.0; n]).collect();
            }
            return Ok(());
        }
        let have: Vec<usize> = self.first.iter().map(|b| b.len()).collect();
        if have != shapes {
            return Err(Error::ShapeMismatch {
                what: "optimizer moment buffers".into(),
                expected: format!("{have:?}"),
                found: format!("{shapes:?}"),
            });
        }
        Ok(())
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.tensors();
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        let gshapes: Vec<usize> = g.iter().map(|t| t.len()).collect();
        if shapes != gshapes {
            return Err(Error::ShapeMismatch {
                what: "gradient".into(),
                expected: format!("{shapes:?}"),
                found: format!("{gshapes:?}"),
            });
        }
        self.ensure_buffers(&shapes)?;
        self.steps += 1;
        let lr = self.config.learning_rate;
        let mut p = params.tensors_mut();
        match self.config.mode {
            OptimizerMode::Sgd => {
                for (pt, gt) in p.iter_mut().zip(&g) {
                    pt.iter_mut().zip(gt.iter()).for_each(|(x, d)| *x -= lr * d);
                }
            }
            OptimizerMode::SgdMomentum { momentum } => {
                for ((pt, gt), vt) in p.iter_mut().zip(&g).zip(&mut self.first) {
                    for ((x, d), v) in pt.iter_mut().zip(gt.iter()).zip(vt.iter_mut()) {
                        *v = momentum * *v + d;
                        *x -= lr * *v;
                    }
                }
            }
            OptimizerMode::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((pt, gt), mt), vt) in p
                    .iter_mut()
                    .zip(&g)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((x, d), m), v) in pt
                        .iter_mut()
                        .zip(gt.iter())
                        .zip(mt.iter_mut())
                        .zip(vt.iter_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
