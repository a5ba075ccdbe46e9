//! Adam optimizer with bias correction.

use super::{Gradients, ParamId, Tensor};

/// First/second moment buffers per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Buffers shaped like `params`; parameter order must stay fixed.
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. Parameters without a gradient entry
    /// are treated as having zero gradient.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &Gradients, lr: f64) {
        assert_eq!(params.len(), self.m.len(), "adam state size mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.into_iter().enumerate() {
            let grad = grads.get(ParamId(i));
            if let Some(g) = grad {
                assert_eq!(g.shape(), p.shape(), "gradient shape mismatch for param {i}");
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let g = grad.map_or(0.0, |t| t.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                pd[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
