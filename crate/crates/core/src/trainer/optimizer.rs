//! Stochastic gradient descent with (Nesterov) momentum and decoupled-from-BN
//! weight decay.

use crate::error::{Error, Result};
use crate::model::Param;

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// One buffer per parameter tensor, in network traversal order.
    pub buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &[&Param], momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            nesterov,
            weight_decay,
            buffers: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// `g = grad + wd * w` (only for parameters with `decay`), `buf = mu * buf + g`,
    /// then `w -= lr * (g + mu * buf)` with Nesterov or `w -= lr * buf` without.
    pub fn step(&mut self, params: Vec<&mut Param>, lr: f64) -> Result<()> {
        if params.len() != self.buffers.len() {
            return Err(Error::input(format!(
                "optimizer tracks {} tensors, got {}",
                self.buffers.len(),
                params.len()
            )));
        }
        let mu = self.momentum;
        for (p, buf) in params.into_iter().zip(&mut self.buffers) {
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            for ((w, g), b) in p.value.iter_mut().zip(&p.grad).zip(buf.iter_mut()) {
                let g = g + wd * *w;
                *b = mu * *b + g;
                let update = if self.nesterov { g + mu * *b } else { *b };
                *w -= lr * update;
            }
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.buffers.iter().flatten().copied().collect()
    }

    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.buffers.iter().map(Vec::len).sum();
        if values.len() != total {
            return Err(Error::input(format!(
                "optimizer state has {} values, expected {total}",
                values.len()
            )));
        }
        let mut off = 0;
        for b in &mut self.buffers {
            let len = b.len();
            b.copy_from_slice(&values[off..off + len]);
            off += len;
        }
        Ok(())
    }
}
