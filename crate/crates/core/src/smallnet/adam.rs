//! Adaptive-moment optimizer with bias correction.

use super::NetError;

const EPS: f64 = 1e-8;

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, param_count: usize) -> Self {
        Self { lr, beta1, beta2, m: vec![0.0; param_count], v: vec![0.0; param_count], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One descent step. Rejects non-finite gradients without touching
    /// parameters or moments.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NetError> {
        assert_eq!(params.len(), self.m.len(), "parameter count mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NetError::NonFiniteGradient);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 3);
        let mut params = vec![0.5, -1.0, 2.0];
        let before = params.clone();
        for _ in 0..5 {
            adam.step(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 2);
        let mut params = vec![0.0, 0.0];
        adam.step(&mut params, &[0.37, -120.0]).unwrap();
        // bias-corrected first step: −lr·g/(|g| + eps) ≈ −lr·sign(g)
        assert!((params[0] + 1e-3).abs() < 1e-9, "{}", params[0]);
        assert!((params[1] - 1e-3).abs() < 1e-9, "{}", params[1]);
    }

    /// Hand-computed three-step trace on a scalar, reimplementing the update
    /// rule with plain arithmetic.
    #[test]
    fn three_steps_match_hand_trace() {
        let (lr, b1, b2) = (0.01, 0.9, 0.999);
        let grads = [0.3, -0.5, 0.2];
        let mut adam = Adam::new(lr, b1, b2, 1);
        let mut params = vec![1.0];

        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for (step, &g) in grads.iter().enumerate() {
            adam.step(&mut params, &[g]).unwrap();
            let t = (step + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            x -= lr * mhat / (vhat.sqrt() + 1e-8);
            assert!((params[0] - x).abs() < 1e-15, "step {step}: {} vs {x}", params[0]);
        }
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 2);
        let mut params = vec![1.0, 2.0];
        adam.step(&mut params, &[0.1, 0.1]).unwrap();
        let after_good = params.clone();
        let err = adam.step(&mut params, &[f64::NAN, 0.1]);
        assert!(matches!(err, Err(NetError::NonFiniteGradient)));
        assert_eq!(params, after_good);
        assert_eq!(adam.step_count(), 1);
        let err = adam.step(&mut params, &[f64::INFINITY, 0.1]);
        assert!(matches!(err, Err(NetError::NonFiniteGradient)));
        assert_eq!(adam.step_count(), 1);
    }
}
