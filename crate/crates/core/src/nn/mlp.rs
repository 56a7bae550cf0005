use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dense, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Multilayer perceptron: hidden layers use `hidden_activation`, the output
/// layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub hidden_activation: Activation,
    pub layers: Vec<Dense>,
}

/// Post-activation values of every layer, input first.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub activations: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn zeros(sizes: &[usize], hidden_activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        Self {
            hidden_activation,
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn init<R: Rng + ?Sized>(sizes: &[usize], hidden_activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        Self {
            hidden_activation,
            layers: sizes
                .windows(2)
                .map(|w| Dense::glorot(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].n_in];
        s.extend(self.layers.iter().map(|l| l.n_out));
        s
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map(|l| l.n_out).unwrap_or(0)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.n_in() {
            return Err(Error::ShapeMismatch {
                what: "mlp input".into(),
                expected: self.n_in().to_string(),
                found: input.len().to_string(),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mlp input"));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.n_out];
            layer.forward_into(&activations[k], &mut out);
            if k < last && self.hidden_activation == Activation::Tanh {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(out);
        }
        let output = activations.last().cloned().unwrap_or_default();
        Ok((output, MlpCache { activations }))
    }

    /// Reverse pass; parameter gradients are accumulated into `grads`.
    pub fn backward(&self, cache: &MlpCache, output_grad: &[f64], grads: &mut MlpParams) -> Vec<f64> {
        let mut delta = output_grad.to_vec();
        let last = self.layers.len() - 1;
        for k in (0..self.layers.len()).rev() {
            if k < last && self.hidden_activation == Activation::Tanh {
                for (d, a) in delta.iter_mut().zip(&cache.activations[k + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            delta = self.layers[k].backward(&cache.activations[k], &delta, &mut grads.layers[k]);
        }
        delta
    }
}

impl ParamSet for MlpParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<Vec<f64>> {
    params.forward(input)
}

/// Parameter gradients and input gradient for a single sample.
pub fn mlp_gradient(params: &MlpParams, input: &[f64], output_grad: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
    if output_grad.len() != params.n_out() {
        return Err(Error::ShapeMismatch {
            what: "mlp output gradient".into(),
            expected: params.n_out().to_string(),
            found: output_grad.len().to_string(),
        });
    }
    let (_, cache) = params.forward_cached(input)?;
    let mut grads = params.zeros_like();
    let dx = params.backward(&cache, output_grad, &mut grads);
    Ok((grads, dx))
}
