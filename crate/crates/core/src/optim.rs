use crate::error::{Error, Result};
use crate::nn::{GradBundle, MlpParams};

/// Squared-gradient accumulators, one per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    acc: Vec<Vec<f64>>,
}

/// Scalar RMSprop: `s ← ρs + (1−ρ)g²`, `p ← p − lr·g/(√s + ε)`.
#[inline]
pub fn rmsprop_step(p: &mut f64, g: f64, s: &mut f64, lr: f64, decay: f64, eps: f64) {
    *s = decay * *s + (1.0 - decay) * g * g;
    *p -= lr * g / (s.sqrt() + eps);
}

impl RmspropState {
    pub fn new(params: &MlpParams) -> Self {
        Self { acc: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.acc
    }

    /// One descent step on `params` along `grads`.
    pub fn update(&mut self, params: &mut MlpParams, grads: &GradBundle, lr: f64, decay: f64, eps: f64) -> Result<()> {
        self.update_with_scale_lr(params, grads, lr, lr, decay, eps)
    }

    /// As [`update`](Self::update), with a separate rate for the output scale.
    pub fn update_with_scale_lr(
        &mut self,
        params: &mut MlpParams,
        grads: &GradBundle,
        lr: f64,
        scale_lr: f64,
        decay: f64,
        eps: f64,
    ) -> Result<()> {
        let scale_idx = params.scale.map(|_| self.acc.len() - 1);
        let gs = grads.tensors();
        let mut ps = params.tensors_mut();
        if gs.len() != ps.len() || ps.len() != self.acc.len() {
            return Err(Error::DimensionMismatch { context: "rmsprop tensors", expected: ps.len(), got: gs.len() });
        }
        for (k, ((p, g), s)) in ps.iter_mut().zip(&gs).zip(self.acc.iter_mut()).enumerate() {
            let lr = if Some(k) == scale_idx { scale_lr } else { lr };
            if p.len() != g.len() || p.len() != s.len() {
                return Err(Error::DimensionMismatch { context: "rmsprop tensor", expected: p.len(), got: g.len() });
            }
            for ((pi, &gi), si) in p.iter_mut().zip(g.iter()).zip(s.iter_mut()) {
                rmsprop_step(pi, gi, si, lr, decay, eps);
            }
        }
        Ok(())
    }
}
