use rand::Rng;

use super::loss::{softmax, softmax_cross_entropy};
use super::{axpy, dot, Dense, ParamSet};
use crate::error::{Error, Result};

/// One LSTM layer. Gate pre-activations are `W·[x; h] + b`, with the rows
/// of `weight` grouped as input, forget, candidate, output (H rows each).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub n_in: usize,
    pub n_hidden: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LstmLayer {
    pub fn zeros(n_in: usize, n_hidden: usize) -> Self {
        Self {
            n_in,
            n_hidden,
            weight: vec![0.0; 4 * n_hidden * (n_in + n_hidden)],
            bias: vec![0.0; 4 * n_hidden],
        }
    }

    /// Uniform ±√(1/H) weights, forget-gate bias 1.
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_hidden: usize, rng: &mut R) -> Self {
        let mut l = Self::zeros(n_in, n_hidden);
        let k = (1.0 / n_hidden as f64).sqrt();
        l.weight.iter_mut().for_each(|w| *w = rng.gen_range(-k..=k));
        l.bias[n_hidden..2 * n_hidden].fill(1.0);
        l
    }

    fn width(&self) -> usize {
        self.n_in + self.n_hidden
    }

    fn row(&self, r: usize) -> &[f64] {
        let w = self.width();
        &self.weight[r * w..(r + 1) * w]
    }
}

/// Stacked LSTM layers followed by a dense softmax head on the last hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub layers: Vec<LstmLayer>,
    pub head: Dense,
}

struct LayerCache {
    /// `[x_t; h_{t-1}]` per step, T × (I+H).
    xh: Vec<f64>,
    /// Activated gates per step, T × 4H.
    gates: Vec<f64>,
    /// Cell states c_0..c_T, (T+1) × H.
    cell: Vec<f64>,
    /// tanh(c_t) per step, T × H.
    cell_tanh: Vec<f64>,
}

pub struct LstmCache {
    steps: usize,
    layers: Vec<LayerCache>,
    last_hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub struct LstmGradient {
    pub params: LstmParams,
    pub loss: f64,
    /// dL/dx for every step of the window, T × I.
    pub input: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmParams {
    pub fn zeros(n_in: usize, hidden: &[usize], n_classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = n_in;
        for &h in hidden {
            layers.push(LstmLayer::zeros(prev, h));
            prev = h;
        }
        Self {
            layers,
            head: Dense::zeros(prev, n_classes),
        }
    }

    pub fn init<R: Rng + ?Sized>(n_in: usize, hidden: &[usize], n_classes: usize, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut prev = n_in;
        for &h in hidden {
            layers.push(LstmLayer::init(prev, h, rng));
            prev = h;
        }
        Self {
            layers,
            head: Dense::glorot(prev, n_classes, rng),
        }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.n_hidden).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_out
    }

    fn steps_of(&self, sequence: &[f64]) -> Result<usize> {
        let n_in = self.n_in();
        if sequence.is_empty() || sequence.len() % n_in != 0 {
            return Err(Error::ShapeMismatch {
                what: "lstm sequence".into(),
                expected: format!("a multiple of {n_in}"),
                found: sequence.len().to_string(),
            });
        }
        Ok(sequence.len() / n_in)
    }

    /// Class probabilities for a flat `T × n_in` sequence.
    pub fn forward(&self, sequence: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(sequence)?.probs)
    }

    pub fn forward_cached(&self, sequence: &[f64]) -> Result<LstmCache> {
        let steps = self.steps_of(sequence)?;
        let mut below: Vec<f64> = sequence.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (i_n, h_n, w) = (layer.n_in, layer.n_hidden, layer.width());
            let mut xh = vec![0.0; steps * w];
            let mut gates = vec![0.0; steps * 4 * h_n];
            let mut cell = vec![0.0; (steps + 1) * h_n];
            let mut cell_tanh = vec![0.0; steps * h_n];
            let mut hidden = vec![0.0; (steps + 1) * h_n];
            for t in 0..steps {
                let xh_t = &mut xh[t * w..(t + 1) * w];
                xh_t[..i_n].copy_from_slice(&below[t * i_n..(t + 1) * i_n]);
                xh_t[i_n..].copy_from_slice(&hidden[t * h_n..(t + 1) * h_n]);
                let g_t = &mut gates[t * 4 * h_n..(t + 1) * 4 * h_n];
                for (r, g) in g_t.iter_mut().enumerate() {
                    *g = layer.bias[r] + dot(layer.row(r), xh_t);
                }
                for k in 0..h_n {
                    let ig = sigmoid(g_t[k]);
                    let fg = sigmoid(g_t[h_n + k]);
                    let cg = g_t[2 * h_n + k].tanh();
                    let og = sigmoid(g_t[3 * h_n + k]);
                    g_t[k] = ig;
                    g_t[h_n + k] = fg;
                    g_t[2 * h_n + k] = cg;
                    g_t[3 * h_n + k] = og;
                    let c = fg * cell[t * h_n + k] + ig * cg;
                    cell[(t + 1) * h_n + k] = c;
                    let tc = c.tanh();
                    cell_tanh[t * h_n + k] = tc;
                    hidden[(t + 1) * h_n + k] = og * tc;
                }
            }
            below = hidden[h_n..].to_vec();
            caches.push(LayerCache {
                xh,
                gates,
                cell,
                cell_tanh,
            });
        }
        let top = self.layers.last().map(|l| l.n_hidden).unwrap_or(0);
        let last_hidden = below[(steps - 1) * top..].to_vec();
        let mut logits = vec![0.0; self.n_classes()];
        self.head.forward_into(&last_hidden, &mut logits);
        let probs = softmax(&logits);
        Ok(LstmCache {
            steps,
            layers: caches,
            last_hidden,
            logits,
            probs,
        })
    }

    /// Backpropagation through time from a logit gradient. Parameter
    /// gradients accumulate into `grads`; the return value is dL/dx, T × n_in.
    pub fn backward(&self, cache: &LstmCache, dlogits: &[f64], grads: &mut LstmParams) -> Vec<f64> {
        let steps = cache.steps;
        let dh_last = self.head.backward(&cache.last_hidden, dlogits, &mut grads.head);

        // Gradient flowing into each step's hidden output from above.
        let top = self.layers.len() - 1;
        let mut dh_above = vec![0.0; steps * self.layers[top].n_hidden];
        let h_top = self.layers[top].n_hidden;
        dh_above[(steps - 1) * h_top..].copy_from_slice(&dh_last);

        for (li, layer) in self.layers.iter().enumerate().rev() {
            let lc = &cache.layers[li];
            let g = &mut grads.layers[li];
            let (i_n, h_n, w) = (layer.n_in, layer.n_hidden, layer.width());
            let mut dx_below = vec![0.0; steps * i_n];
            let mut dh_next = vec![0.0; h_n];
            let mut dc_next = vec![0.0; h_n];
            let mut dz = vec![0.0; 4 * h_n];
            let mut dxh = vec![0.0; w];
            for t in (0..steps).rev() {
                let gt = &lc.gates[t * 4 * h_n..(t + 1) * 4 * h_n];
                for k in 0..h_n {
                    let (ig, fg, cg, og) = (gt[k], gt[h_n + k], gt[2 * h_n + k], gt[3 * h_n + k]);
                    let tc = lc.cell_tanh[t * h_n + k];
                    let dh = dh_above[t * h_n + k] + dh_next[k];
                    let dc = dh * og * (1.0 - tc * tc) + dc_next[k];
                    let c_prev = lc.cell[t * h_n + k];
                    dz[k] = dc * cg * ig * (1.0 - ig);
                    dz[h_n + k] = dc * c_prev * fg * (1.0 - fg);
                    dz[2 * h_n + k] = dc * ig * (1.0 - cg * cg);
                    dz[3 * h_n + k] = dh * tc * og * (1.0 - og);
                    dc_next[k] = dc * fg;
                }
                let xh_t = &lc.xh[t * w..(t + 1) * w];
                dxh.fill(0.0);
                for (r, &d) in dz.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.bias[r] += d;
                    axpy(d, xh_t, &mut g.weight[r * w..(r + 1) * w]);
                    axpy(d, layer.row(r), &mut dxh);
                }
                dx_below[t * i_n..(t + 1) * i_n].copy_from_slice(&dxh[..i_n]);
                dh_next.copy_from_slice(&dxh[i_n..]);
            }
            dh_above = dx_below;
        }
        dh_above
    }
}

impl ParamSet for LstmParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self
            .layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect();
        v.push(&self.head.weight);
        v.push(&self.head.bias);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self
            .layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect();
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }
}

/// Class probabilities for a window of exactly `window` steps.
pub fn lstm_forward(params: &LstmParams, sequence: &[f64], window: usize) -> Result<Vec<f64>> {
    let expected = window * params.n_in();
    if sequence.len() != expected {
        return Err(Error::ShapeMismatch {
            what: "lstm window".into(),
            expected: format!("{window} steps ({expected} values)"),
            found: format!("{} values", sequence.len()),
        });
    }
    params.forward(sequence)
}

/// Softmax cross-entropy gradient through the full window.
pub fn lstm_gradient(params: &LstmParams, sequence: &[f64], label: &[f64]) -> Result<LstmGradient> {
    if label.len() != params.n_classes() {
        return Err(Error::ShapeMismatch {
            what: "label".into(),
            expected: params.n_classes().to_string(),
            found: label.len().to_string(),
        });
    }
    let cache = params.forward_cached(sequence)?;
    let (loss, dlogits) = softmax_cross_entropy(&cache.logits, label);
    let mut grads = params.zeros_like();
    let input = params.backward(&cache, &dlogits, &mut grads);
    Ok(LstmGradient {
        params: grads,
        loss,
        input,
    })
}
