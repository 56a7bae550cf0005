use rand::Rng;

use super::{axpy, dot};

/// Fully connected layer, weights stored row-major as `n_out × n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weight: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        let mut d = Self::zeros(n_in, n_out);
        d.weight
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-limit..=limit));
        d
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weight[j * self.n_in..(j + 1) * self.n_in]
    }

    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.bias[j] + dot(self.row(j), x);
        }
    }

    /// Accumulates parameter gradients into `grads` and returns dL/dx.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.n_in];
        for (j, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.bias[j] += g;
            axpy(g, x, &mut grads.weight[j * self.n_in..(j + 1) * self.n_in]);
            axpy(g, self.row(j), &mut dx);
        }
        dx
    }
}
