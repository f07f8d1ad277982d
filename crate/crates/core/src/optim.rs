//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Moments start at zero, shaped like `params`. β1 = 0.9, β2 = 0.999,
    /// ε = 1e-8.
    pub fn new(params: &[Tensor], lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Applies one update. `None` gradients are treated as zero.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: {} moments, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.as_ref().is_some_and(|g| g.shape() != p.shape()) {
                return Err(Error::Shape(format!("adam: parameter {i} shape changed")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            match &grads[i] {
                Some(g) => {
                    for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
                        *mv = b1 * *mv + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
                None => {
                    for (mv, vv) in m.iter_mut().zip(v) {
                        *mv *= b1;
                        *vv *= b2;
                    }
                }
            }
        }
        Ok(())
    }
}
