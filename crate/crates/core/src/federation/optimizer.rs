//! Mini-batch SGD with optional momentum.

use crate::nn::ModelParams;
use crate::tensor::Tensor;

/// `v ← β·v + g; θ ← θ − lr·v`. With `beta = 0` this is plain SGD. Buffers
/// persist across steps, so one optimizer must stay attached to one model.
pub struct Momentum {
    pub lr: f64,
    pub beta: f64,
    buf: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn new(lr: f64, beta: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&beta), "momentum must lie in [0, 1)");
        Momentum { lr, beta, buf: Vec::new() }
    }

    /// Applies one step. `grads` must align with `model.flat_params()`
    /// (the order `Tape::grad` returns for `TracedModel::vars()`).
    pub fn step(&mut self, model: &mut ModelParams, grads: &[Tensor]) {
        let mut params = model.flat_params();
        assert_eq!(params.len(), grads.len(), "gradient list length mismatch");
        if self.buf.is_empty() {
            self.buf = params.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        assert_eq!(self.buf.len(), params.len(), "optimizer bound to a different model");
        for (k, tensor) in params.iter_mut().enumerate() {
            assert_eq!(tensor.shape(), grads[k].shape(), "gradient shape mismatch");
            let buf = &mut self.buf[k];
            let g = grads[k].data();
            let mut data = tensor.data().to_vec();
            for i in 0..data.len() {
                buf[i] = self.beta * buf[i] + g[i];
                data[i] -= self.lr * buf[i];
            }
            *tensor = Tensor::new(tensor.shape().to_vec(), data);
        }
        model.set_flat_params(&params);
    }

    /// Gradient-ascent variant of [`step`](Self::step) used by the
    /// discrepancy-maximization phase of the two-classifier baseline.
    pub fn step_ascend(&mut self, model: &mut ModelParams, grads: &[Tensor]) {
        let negated: Vec<Tensor> =
            grads.iter().map(|g| crate::tensor::scale(g, -1.0)).collect();
        self.step(model, &negated);
    }
}
