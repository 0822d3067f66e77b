use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Drops the moments of parameter `index`, e.g. after it was overwritten.
    pub fn reset_rows(&mut self, index: usize, rows: &[usize]) {
        for state in [&mut self.first, &mut self.second] {
            if let Some(t) = state.get_mut(index) {
                for &r in rows {
                    t.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }

    /// Applies one update. `params` and `grads` must keep the same order and
    /// shapes on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Usage(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first.is_empty() {
                    self.first = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
                    self.second = self.first.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * d;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * d * d;
                        *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        opt.step(&mut [&mut p], &[Tensor::vector(vec![0.5, -1.0])], 0.1).unwrap();
        assert_eq!(p.data(), &[0.95, 2.1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        opt.step(&mut [&mut p], &[Tensor::vector(vec![3.0, -0.01])], 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - 2.1).abs() < 1e-5);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Tensor::vector(vec![3.0, -2.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        for _ in 0..2000 {
            let g = Tensor::vector(p.data().iter().map(|x| 2.0 * x).collect());
            opt.step(&mut [&mut p], &[g], 0.01).unwrap();
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        assert!(opt.step(&mut [&mut p], &[Tensor::vector(vec![1.0])], 0.1).is_err());
    }
}
