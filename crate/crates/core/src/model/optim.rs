use super::{DiffusionModel, ModelGrads};
use crate::error::{Error, Result};

/// Adam with bias correction and coupled (L2) weight decay on the flagged
/// parameter groups.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// One update over parameter groups `(values, decay)` with matching
    /// gradients.
    pub fn step_slices(&mut self, params: Vec<(&mut [f64], bool)>, grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter groups but {} gradient groups",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (gi, ((p, decay), g)) in params.into_iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.m[gi].len() != p.len() {
                return Err(Error::Shape(format!("parameter group {gi} changed size")));
            }
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for j in 0..p.len() {
                let mut grad = g[j];
                if decay {
                    grad += self.weight_decay * p[j];
                }
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad * grad;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, model: &mut DiffusionModel, grads: &ModelGrads) -> Result<()> {
        let g = grads.slices();
        self.step_slices(model.params_mut(), &g)
    }
}
