//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

/// Optimizer state for one parameter list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    /// Moments are allocated to match `shapes` and start at zero.
    pub fn new(learning_rate: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            second_moment: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }

    /// One bias-corrected Adam update, in place.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), NumericsError> {
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        self.update_refs(&mut refs, grads)
    }

    /// [`AdamState::update`] over borrowed tensors.
    pub fn update_refs(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
    ) -> Result<(), NumericsError> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam",
                detail: format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if !p.same_shape(g) {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam",
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(NumericsError::NonFinite { op: "adam gradient" });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut state = AdamState::new(1e-3, &[(1, 2)]);
        let mut params = vec![Tensor::row(vec![0.3, -0.7])];
        let before = params[0].clone();
        for _ in 0..5 {
            state.update(&mut params, &[Tensor::zeros(1, 2)]).unwrap();
        }
        assert_eq!(params[0], before);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias correction makes the first step ~ lr * g / (|g| + eps).
        let mut state = AdamState::new(1e-3, &[(1, 1)]);
        let mut params = vec![Tensor::scalar(1.0)];
        state.update(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        let moved = 1.0 - params[0].item();
        assert!((moved - 1e-3).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let mut state = AdamState::new(1e-2, &[(1, 2)]);
        let mut params = vec![Tensor::row(vec![0.5, 0.5])];
        for _ in 0..3 {
            state.update(&mut params, &[Tensor::row(vec![0.2, 0.2])]).unwrap();
        }
        assert_eq!(params[0].at(0, 0), params[0].at(0, 1));
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut state = AdamState::new(1e-3, &[(1, 1)]);
        let mut params = vec![Tensor::scalar(1.0)];
        let err = state.update(&mut params, &[Tensor::scalar(f64::NAN)]);
        assert!(err.is_err());
    }
}
