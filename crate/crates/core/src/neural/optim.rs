//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::linalg::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(tensors: &[&[T]]) -> Self {
        Self {
            m: tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
            v: tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}

/// One update: `θ ← θ − lr·wd·θ`, then the bias-corrected moment step.
pub fn optimizer_step<T: Scalar>(params: &mut [&mut [T]], grads: &[&[T]], state: &mut AdamState<T>, opt: &AdamW) {
    assert_eq!(params.len(), grads.len(), "tensor count");
    assert_eq!(params.len(), state.m.len(), "optimizer state tensor count");
    state.t += 1;
    let bc1 = 1.0 - opt.beta1.powi(state.t);
    let bc2 = 1.0 - opt.beta2.powi(state.t);
    let decay = T::cast_from(1.0 - opt.lr * opt.weight_decay);
    let (b1, b2) = (T::cast_from(opt.beta1), T::cast_from(opt.beta2));
    let (one_b1, one_b2) = (T::cast_from(1.0 - opt.beta1), T::cast_from(1.0 - opt.beta2));
    // lr / bc1 folded into the numerator, 1 / sqrt(bc2) into the denominator
    let step = T::cast_from(opt.lr / bc1);
    let inv_sqrt_bc2 = T::cast_from(1.0 / bc2.sqrt());
    let eps = T::cast_from(opt.eps);
    for (k, (theta, g)) in params.iter_mut().zip(grads).enumerate() {
        assert_eq!(theta.len(), g.len(), "tensor {k} shape");
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..theta.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            theta[i] = theta[i] * decay - step * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(theta: &mut [f64], g: &[f64], opt: &AdamW) {
        let mut state = AdamState::new(&[&*theta]);
        optimizer_step(&mut [theta], &[g], &mut state, opt);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut theta = vec![1.0, -2.0, 0.5];
        let g = [0.3, -7.0, 1e-3];
        let opt = AdamW {
            eps: 1e-12,
            ..AdamW::new(1e-2, 0.0)
        };
        run(&mut theta, &g, &opt);
        let expect = [1.0 - 1e-2, -2.0 + 1e-2, 0.5 - 1e-2];
        for (t, e) in theta.iter().zip(expect) {
            assert!((t - e).abs() < 1e-8, "{t} vs {e}");
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut theta = vec![1.5, -0.25];
        run(&mut theta, &[0.0, 0.0], &AdamW::new(1e-3, 0.0));
        assert_eq!(theta, vec![1.5, -0.25]);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let mut theta = vec![2.0, -4.0];
        let opt = AdamW::new(1e-2, 0.5);
        run(&mut theta, &[0.0, 0.0], &opt);
        assert_eq!(theta, vec![2.0 * (1.0 - 5e-3), -4.0 * (1.0 - 5e-3)]);
    }
}
