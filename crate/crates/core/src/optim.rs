//! Adam over a [`ParamStore`].

use crate::error::{DampError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment estimates for exactly the parameters of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub step: u64,
    pub lr: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Matrix<T>> = params
            .iter()
            .map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
        }
    }

    /// One bias-corrected Adam update. `grads[i]` belongs to the `i`-th
    /// parameter; `None` counts as a zero gradient.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Option<Matrix<T>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(DampError::Invalid(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let c1 = T::one() - T::of(BETA1.powi(t));
        let c2 = T::one() - T::of(BETA2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(EPSILON);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else {
                // A zero gradient still decays the moments.
                self.m[i].as_mut_slice().iter_mut().for_each(|x| *x *= b1);
                self.v[i].as_mut_slice().iter_mut().for_each(|x| *x *= b2);
                let p = params.get_mut(id);
                for ((w, &m), &v) in p.as_mut_slice().iter_mut().zip(self.m[i].as_slice()).zip(self.v[i].as_slice()) {
                    *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                }
                continue;
            };
            if g.shape() != params.get(id).shape() {
                return Err(DampError::Shape {
                    op: "adam",
                    detail: format!("gradient {:?} for parameter {}", g.shape(), params.name(id)),
                });
            }
            let p = params.get_mut(id);
            let (m, v) = (self.m[i].as_mut_slice(), self.v[i].as_mut_slice());
            for (((w, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Per-epoch cosine annealing: `lr0 * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(lr0: f64, epoch: usize, total: usize) -> f64 {
    let x = (epoch.min(total) as f64) / total.max(1) as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * x).cos())
}
