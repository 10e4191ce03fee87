use crate::error::{Error, Result};

use super::{Param, Scalar};

/// Bias-corrected Adam with a constant learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    /// First moments, one buffer per parameter in model order.
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to `params` using their `grad` buffers. Moments are
    /// allocated on the first step.
    pub fn update(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        if self.m.is_empty() && self.step == 0 {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad.len() != p.len() || self.m[i].len() != p.len() || self.v[i].len() != p.len() {
                return Err(Error::Shape(format!(
                    "optimizer state for {} has {} moments, parameter {} values and {} gradients",
                    p.name,
                    self.m[i].len(),
                    p.len(),
                    p.grad.len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j].as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * g;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * g * g;
                m[j] = T::from_f64_lossy(mj);
                v[j] = T::from_f64_lossy(vj);
                let step = self.learning_rate * (mj / c1) / ((vj / c2).sqrt() + self.epsilon);
                p.value[j] = T::from_f64_lossy(p.value[j].as_f64() - step);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64, g: f64) -> Param<f64> {
        let mut p = Param::zeros("w", &[1]);
        p.value[0] = v;
        p.grad[0] = g;
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.7, 0.0);
        let mut adam = AdamState::new(0.1);
        for _ in 0..5 {
            adam.update(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value[0], 0.7);
    }

    #[test]
    fn first_step_has_learning_rate_magnitude() {
        let mut p = scalar(0.0, 1.0);
        let mut adam = AdamState::new(0.1);
        adam.update(&mut [&mut p]).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        assert!((p.value[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = scalar(1.0, 0.0);
        let mut adam = AdamState::new(0.05);
        for _ in 0..200 {
            p.grad[0] = 2.0 * p.value[0];
            adam.update(&mut [&mut p]).unwrap();
        }
        assert!(p.value[0].abs() < 1e-2, "{}", p.value[0]);
    }

    #[test]
    fn mismatched_state_is_shape_error() {
        let mut a = scalar(0.0, 1.0);
        let mut b = scalar(0.0, 1.0);
        let mut adam = AdamState::new(0.1);
        adam.update(&mut [&mut a]).unwrap();
        assert!(matches!(
            adam.update(&mut [&mut a, &mut b]),
            Err(Error::Shape(_))
        ));
    }
}
