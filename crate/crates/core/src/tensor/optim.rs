//! Stochastic gradient descent with classical momentum.

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// One in-place update: `v = momentum * v + (g + decay * p)`, `p -= lr * v`.
pub fn sgd_step<T: Scalar>(param: &mut [T], grad: &[T], velocity: &mut [T], lr: T, momentum: T, weight_decay: T) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "sgd: {} parameters, {} gradients, {} velocity entries",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, lr: T, momentum: T, weight_decay: T) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: params.into_iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    /// Updates `params[i]` only where `grads[i]` is present; absent entries
    /// keep both their value and their velocity.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Vec<T>>]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            if let Some(g) = g {
                sgd_step(p.data_mut(), g, v, self.lr, self.momentum, self.weight_decay)?;
            }
        }
        Ok(())
    }

    pub fn velocity(&self, i: usize) -> &[T] {
        &self.velocity[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_descent() {
        let mut p = vec![1.0f64, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = vec![0.0f64];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        // v2 = 0.9 * 1 + 1 = 1.9
        assert!((v[0] - 1.9).abs() < 1e-15);
        assert!((p[0] + 0.1 + 0.19).abs() < 1e-15);
    }

    #[test]
    fn decay_adds_to_gradient() {
        let mut p = vec![2.0f64];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[0.0], &mut v, 1.0, 0.0, 0.25).unwrap();
        assert!((p[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn absent_gradient_freezes_state() {
        let mut params = vec![Tensor::vector(vec![1.0f64]), Tensor::vector(vec![1.0])];
        let mut opt = Sgd::new(&params, 0.1, 0.9, 0.1);
        opt.step(&mut params, &[Some(vec![1.0]), None]).unwrap();
        assert_eq!(params[1].data(), &[1.0]);
        assert_eq!(opt.velocity(1), &[0.0]);
        assert!(params[0].data()[0] < 1.0);
        assert!(sgd_step(&mut [0.0f64], &[0.0, 1.0], &mut [0.0], 0.1, 0.0, 0.0).is_err());
    }
}
