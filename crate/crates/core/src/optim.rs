//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    /// Zeroed moments for parameters of the given sizes, with the usual
    /// defaults β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let first: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.first[i], &self.second[i])
    }

    /// Restores saved state (checkpoint resume).
    pub fn restore(&mut self, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Result<()> {
        let same = |a: &[Vec<f64>]| a.len() == self.first.len() && a.iter().zip(&self.first).all(|(x, y)| x.len() == y.len());
        if !same(&first) || !same(&second) {
            return Err(Error::Checkpoint("optimizer moments do not match parameter sizes".into()));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// One update of every parameter. `lrs[i]` is the learning rate of
    /// parameter `i`.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[&[f64]], lrs: &[f64]) -> Result<()> {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.first.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.first.len()],
                rhs: vec![params.len(), grads.len(), lrs.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != p.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = lrs[i];
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((x, &gv), mv), vv) in p.data_mut().iter_mut().zip(grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
