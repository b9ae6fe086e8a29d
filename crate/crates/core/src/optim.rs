//! Adam with decoupled weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{GradStore, Tensor};

/// Optimizer state: first/second moments per parameter name plus the step
/// counter and hyperparameters.
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
    pub moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// One update over named parameters. Parameters without a gradient in
    /// `grads` are left untouched (genuinely dead paths); a non-finite
    /// gradient aborts naming the parameter.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, param) in params.iter_mut() {
            let Some(g) = grads.get(param) else { continue };
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Grad(format!(
                    "non-finite gradient ({bad}) for parameter '{name}'"
                )));
            }
            let n = g.len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(Error::Grad(format!(
                    "moment shape changed for parameter '{name}'"
                )));
            }
            let mut data = param.data().to_vec();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                // decoupled weight decay
                data[i] -= self.lr * self.weight_decay * param.data()[i];
            }
            **param = Tensor::param(param.shape(), data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::tensor::{backward, with_grads};

    fn quadratic_step(x: &mut Tensor, adam: &mut AdamState) -> f32 {
        // loss = sum(x^2), expressed as the dot product x . x
        let (loss, grads) = with_grads(|| {
            let a = ops::reshape(x, &[1, 1, x.elem_count()]).unwrap();
            let b = ops::reshape(x, &[1, x.elem_count(), 1]).unwrap();
            let dot = ops::bmm(&a, &b, false).unwrap();
            let loss = ops::sum_all(&dot);
            let g = backward(&loss).unwrap();
            (loss.scalar_value().unwrap(), g)
        });
        let mut binding = [("x".to_string(), &mut *x)];
        adam.step(&mut binding, &grads).unwrap();
        loss
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut x = Tensor::param(&[2], vec![1.0, -2.0]).unwrap();
        let mut adam = AdamState::new(0.1, 0.0);
        let mut grads = GradStore::default();
        grads.accumulate(&x, vec![0.0, 0.0]);
        let before = x.data().to_vec();
        let mut binding = [("x".to_string(), &mut x)];
        adam.step(&mut binding, &grads).unwrap();
        assert_eq!(x.data(), before.as_slice());
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // With bias correction, step 1 moves by ~lr * sign(g).
        let mut x = Tensor::param(&[1], vec![0.0]).unwrap();
        let mut adam = AdamState::new(0.01, 0.0);
        let mut grads = GradStore::default();
        grads.accumulate(&x, vec![3.0]);
        let mut binding = [("x".to_string(), &mut x)];
        adam.step(&mut binding, &grads).unwrap();
        assert!((x.data()[0] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn two_steps_decrease_quadratic_from_one() {
        let mut x = Tensor::param(&[1], vec![1.0]).unwrap();
        let mut adam = AdamState::new(0.1, 0.0);
        let l0 = quadratic_step(&mut x, &mut adam);
        let l1 = quadratic_step(&mut x, &mut adam);
        let l2 = {
            let sq: f32 = x.data().iter().map(|v| v * v).sum();
            sq
        };
        assert!(l1 < l0);
        assert!(l2 < l1);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut x = Tensor::param(&[1], vec![1.0]).unwrap();
        let mut adam = AdamState::new(0.1, 0.0);
        let mut grads = GradStore::default();
        grads.accumulate(&x, vec![f32::NAN]);
        let mut binding = [("theta".to_string(), &mut x)];
        let err = adam.step(&mut binding, &grads).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }
}
