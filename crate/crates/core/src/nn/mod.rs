//! Dense and stacked-LSTM networks with hand-written reverse-mode gradients.

mod dense;
mod io;
mod loss;
mod lstm;
mod mlp;
mod optim;

pub use dense::Dense;
pub use io::{load_weights, save_weights, Persist, Tensor, WeightFile, WEIGHT_FORMAT_VERSION};
pub use loss::{huber_loss, softmax, softmax_cross_entropy};
pub use lstm::{lstm_forward, lstm_gradient, LstmCache, LstmGradient, LstmLayer, LstmParams};
pub use mlp::{mlp_forward, mlp_gradient, Activation, MlpCache, MlpParams};
pub use optim::{Optimizer, OptimizerConfig, OptimizerMode};

/// A fixed list of parameter tensors that optimizers and gradient
/// accumulators can walk in a stable order.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}

/// Four-accumulator dot product; the summation order is fixed.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// y += a·x
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
