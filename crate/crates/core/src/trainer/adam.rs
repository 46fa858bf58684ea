//! Adam with bias correction. Updates are functional: a step consumes
//! parameter values and returns replacements, so callers keep ownership of
//! the canonical tensors.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Optimizer state: first and second moments per parameter plus a step
/// counter. Moment shapes always mirror the parameter shapes.
#[derive(Debug, Clone)]
pub struct Adam<T = f64> {
    learning_rate: f64,
    step: u64,
    moments: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64, params: &[&Tensor<T>]) -> Self {
        Adam {
            learning_rate,
            step: 0,
            moments: params
                .iter()
                .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update across all parameters. `params` and
    /// `grads` must be parallel to the constructor's parameter list.
    pub fn step(&mut self, params: Vec<Tensor<T>>, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        if params.len() != self.moments.len() || grads.len() != self.moments.len() {
            return Err(Error::InvalidArgument(format!(
                "adam tracks {} parameters, got {} values and {} gradients",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);

        let mut out = Vec::with_capacity(params.len());
        for ((param, grad), (m, v)) in params.into_iter().zip(grads).zip(&mut self.moments) {
            if param.shape() != m.shape() || grad.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: m.shape().to_vec(),
                    rhs: if param.shape() != m.shape() {
                        param.shape().to_vec()
                    } else {
                        grad.shape().to_vec()
                    },
                });
            }
            let n = param.len();
            let mut new_m = Vec::with_capacity(n);
            let mut new_v = Vec::with_capacity(n);
            let mut new_p = Vec::with_capacity(n);
            for i in 0..n {
                let g = grad.data()[i].as_f64();
                let mi = BETA1 * m.data()[i].as_f64() + (1.0 - BETA1) * g;
                let vi = BETA2 * v.data()[i].as_f64() + (1.0 - BETA2) * g * g;
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                let p = param.data()[i].as_f64() - self.learning_rate * m_hat / (v_hat.sqrt() + EPSILON);
                new_m.push(T::from_f64(mi));
                new_v.push(T::from_f64(vi));
                new_p.push(T::from_f64(p));
            }
            let shape = m.shape().to_vec();
            *m = Tensor::from_vec(shape.clone(), new_m)?;
            *v = Tensor::from_vec(shape.clone(), new_v)?;
            out.push(Tensor::from_vec(shape, new_p)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_tensor(v: f64) -> Tensor<f64> {
        Tensor::from_vec(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let p = Tensor::from_vec(vec![2], vec![1.5, -0.25]).unwrap();
        let mut adam = Adam::new(0.01, &[&p]);
        let g = Tensor::zeros(&[2]);
        let out = adam.step(vec![p.clone()], &[g]).unwrap();
        assert_eq!(out[0].data(), p.data());
    }

    #[test]
    fn zero_learning_rate_is_a_null_step() {
        let p = Tensor::from_vec(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let mut adam = Adam::new(0.0, &[&p]);
        let g = Tensor::from_vec(vec![3], vec![5.0, -1.0, 0.5]).unwrap();
        let mut cur = p.clone();
        for _ in 0..4 {
            cur = adam.step(vec![cur], &[g.clone()]).unwrap().pop().unwrap();
        }
        assert_eq!(cur.data(), p.data());
    }

    #[test]
    fn first_step_moves_by_learning_rate_regardless_of_gradient_scale() {
        // Bias correction makes the first update lr * g / (|g| + eps).
        for g in [0.001, 1.0, 250.0] {
            let p = scalar_tensor(7.0);
            let mut adam = Adam::new(0.003, &[&p]);
            let grad = scalar_tensor(g);
            let out = adam.step(vec![p], &[grad]).unwrap();
            let moved = 7.0 - out[0].data()[0];
            assert!((moved - 0.003).abs() < 1e-6, "g={g} moved {moved}");
        }
    }

    #[test]
    fn matches_independent_scalar_recomputation_for_three_steps() {
        // Quadratic loss 0.5*(a^2 + 3*b^2): gradients (a, 3b).
        let lr = 0.1;
        let (mut a, mut b) = (1.0f64, -2.0f64);
        let params = Tensor::from_vec(vec![2], vec![a, b]).unwrap();
        let mut adam = Adam::new(lr, &[&params]);
        let mut cur = params;

        let (mut ma, mut va, mut mb, mut vb) = (0.0, 0.0, 0.0, 0.0);
        for t in 1..=3 {
            let (ga, gb) = (a, 3.0 * b);
            ma = BETA1 * ma + (1.0 - BETA1) * ga;
            va = BETA2 * va + (1.0 - BETA2) * ga * ga;
            mb = BETA1 * mb + (1.0 - BETA1) * gb;
            vb = BETA2 * vb + (1.0 - BETA2) * gb * gb;
            let c1 = 1.0 - BETA1.powi(t);
            let c2 = 1.0 - BETA2.powi(t);
            a -= lr * (ma / c1) / ((va / c2).sqrt() + EPSILON);
            b -= lr * (mb / c1) / ((vb / c2).sqrt() + EPSILON);

            let grads = Tensor::from_vec(vec![2], vec![cur.data()[0], 3.0 * cur.data()[1]]).unwrap();
            cur = adam.step(vec![cur], &[grads]).unwrap().pop().unwrap();
        }
        assert!((cur.data()[0] - a).abs() < 1e-15);
        assert!((cur.data()[1] - b).abs() < 1e-15);
        assert_eq!(adam.step_count(), 3);
    }

    #[test]
    fn rejects_mismatched_shapes_and_counts() {
        let p = Tensor::<f64>::zeros(&[2]);
        let mut adam = Adam::new(0.01, &[&p]);
        assert!(adam.step(vec![p.clone(), p.clone()], &[Tensor::zeros(&[2])]).is_err());
        assert!(adam
            .step(vec![p.clone()], &[Tensor::zeros(&[3])])
            .is_err());
    }
}
