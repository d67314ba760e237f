//! First-order optimizers: Adam with decoupled weight decay, and plain SGD.

use super::{NumericsError, Tensor};

/// Which update rule to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Adam with bias-corrected moments and decoupled weight decay.
    Adaptive,
    /// `p <- p - lr * g`, plus the same decoupled decay when configured.
    PlainSgd,
}

/// Per-parameter moment accumulators and hyperparameters for a list of
/// parameter tensors. Slot `i` always corresponds to parameter `i` of the
/// list the state was created for.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    slots: Vec<Slot>,
}

#[derive(Debug, Clone)]
struct Slot {
    m: Tensor,
    v: Tensor,
    step: u64,
}

impl OptimizerState {
    /// Fresh state for parameters of the given shapes.
    pub fn new(
        kind: OptimizerKind,
        learning_rate: f64,
        weight_decay: f64,
        shapes: &[(usize, usize)],
    ) -> Self {
        OptimizerState {
            kind,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            slots: shapes
                .iter()
                .map(|&(r, c)| Slot {
                    m: Tensor::zeros(r, c),
                    v: Tensor::zeros(r, c),
                    step: 0,
                })
                .collect(),
        }
    }

    /// Applies one update to every parameter according to [`Self::kind`].
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), NumericsError> {
        match self.kind {
            OptimizerKind::Adaptive => adam_step(params, grads, self),
            OptimizerKind::PlainSgd => sgd_step(params, grads, self),
        }
    }

    /// Step counter of slot `i` (0 until the first update).
    pub fn step_count(&self, i: usize) -> u64 {
        self.slots[i].step
    }

    fn validate(&self, params: &[Tensor], grads: &[Tensor]) -> Result<(), NumericsError> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(NumericsError::invalid(
                "optimizer_step",
                format!(
                    "state has {} slots, got {} params / {} grads",
                    self.slots.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for i in 0..params.len() {
            if params[i].shape() != grads[i].shape() || params[i].shape() != self.slots[i].m.shape()
            {
                return Err(NumericsError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs_rows: params[i].rows(),
                    lhs_cols: params[i].cols(),
                    rhs_rows: grads[i].rows(),
                    rhs_cols: grads[i].cols(),
                });
            }
            grads[i].check_finite("optimizer_step")?;
        }
        Ok(())
    }
}

/// One Adam update with bias-corrected moments over a parameter list.
/// Weight decay is decoupled: it shrinks each parameter directly instead of
/// being folded into the gradient, so the adaptive scaling never touches it.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<(), NumericsError> {
    state.validate(params, grads)?;
    let (lr, wd) = (state.learning_rate, state.weight_decay);
    let (beta1, beta2, eps) = (state.beta1, state.beta2, state.epsilon);
    for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        let slot = &mut state.slots[i];
        slot.step += 1;
        let bc1 = 1.0 - beta1.powi(slot.step as i32);
        let bc2 = 1.0 - beta2.powi(slot.step as i32);
        let (p, g) = (param.data_mut(), grad.data());
        let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
        for j in 0..p.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            p[j] -= lr * wd * p[j];
        }
        param.check_finite("adam_step")?;
    }
    Ok(())
}

/// One plain gradient-descent update over a parameter list, with the same
/// decoupled decay when `weight_decay > 0`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<(), NumericsError> {
    state.validate(params, grads)?;
    let (lr, wd) = (state.learning_rate, state.weight_decay);
    for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        state.slots[i].step += 1;
        let (p, g) = (param.data_mut(), grad.data());
        for j in 0..p.len() {
            p[j] -= lr * g[j];
            p[j] -= lr * wd * p[j];
        }
        param.check_finite("sgd_step")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_is_a_fixed_point() {
        let mut state = OptimizerState::new(OptimizerKind::Adaptive, 0.1, 0.0, &[(1, 2)]);
        let mut params = vec![Tensor::from_vec(1, 2, vec![1.5, -2.5]).unwrap()];
        let grads = vec![Tensor::zeros(1, 2)];
        let before = params[0].clone();
        for _ in 0..5 {
            state.step(&mut params, &grads).unwrap();
        }
        assert!(params[0].bits_eq(&before));
        assert_eq!(state.step_count(0), 5);
    }

    #[test]
    fn first_adam_step_moves_by_about_learning_rate() {
        let lr = 0.05;
        let mut state = OptimizerState::new(OptimizerKind::Adaptive, lr, 0.0, &[(1, 1)]);
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(1.0)];
        state.step(&mut params, &grads).unwrap();
        let moved = params[0].item();
        assert!(
            (moved + lr).abs() < lr * 1e-6,
            "expected ~ -{lr}, got {moved}"
        );
    }

    #[test]
    fn identical_inputs_give_identical_trajectories() {
        let run = || {
            let mut state = OptimizerState::new(OptimizerKind::Adaptive, 0.01, 0.001, &[(2, 2)]);
            let mut params = vec![Tensor::from_vec(2, 2, vec![0.1, -0.2, 0.3, -0.4]).unwrap()];
            for i in 0..10 {
                let g = Tensor::from_vec(2, 2, vec![0.5, -1.0, 0.25 * i as f64, 2.0]).unwrap();
                state.step(&mut params, &[g]).unwrap();
            }
            params.remove(0)
        };
        assert!(run().bits_eq(&run()));
    }

    #[test]
    fn plain_sgd_without_decay_is_the_literal_update() {
        let mut state = OptimizerState::new(OptimizerKind::PlainSgd, 0.5, 0.0, &[(1, 2)]);
        let mut params = vec![Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap()];
        let grads = vec![Tensor::from_vec(1, 2, vec![0.5, -0.5]).unwrap()];
        state.step(&mut params, &grads).unwrap();
        assert_eq!(params[0].data(), &[0.75, 2.25]);
    }

    #[test]
    fn decoupled_decay_shrinks_even_with_zero_gradient() {
        let mut state = OptimizerState::new(OptimizerKind::PlainSgd, 0.1, 0.5, &[(1, 1)]);
        let mut params = vec![Tensor::scalar(1.0)];
        state.step(&mut params, &[Tensor::scalar(0.0)]).unwrap();
        assert!((params[0].item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lists_are_rejected() {
        let mut state = OptimizerState::new(OptimizerKind::Adaptive, 0.1, 0.0, &[(1, 1)]);
        let mut params = vec![Tensor::scalar(0.0), Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        assert!(state.step(&mut params, &grads).is_err());
    }
}
