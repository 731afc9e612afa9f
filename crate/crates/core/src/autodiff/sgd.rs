use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum SGD with coupled weight decay:
/// `v <- mu v + (g + wd p)`, `p <- p - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new<'a>(config: SgdConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        SgdState {
            config,
            velocity: shapes.into_iter().map(Tensor::zeros).collect(),
        }
    }

    /// One update. `lrs[i]` is the learning rate of `params[i]`; a `None`
    /// gradient leaves that parameter and its buffer untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], lrs: &[f32]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "{} params, {} grads, {} learning rates, {} buffers",
                    params.len(),
                    grads.len(),
                    lrs.len(),
                    self.velocity.len()
                ),
            ));
        }
        let SgdConfig { momentum, weight_decay } = self.config;
        for (i, ((p, g), v)) in params.iter_mut().zip(grads).zip(&mut self.velocity).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("parameter {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            let lr = lrs[i];
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = momentum * *vv + (gv + weight_decay * *pv);
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
