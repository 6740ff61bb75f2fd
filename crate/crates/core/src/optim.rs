//! Adam with bias correction and the stepwise learning-rate decay schedule.

use crate::error::{Error, Result};

/// Per-parameter-group optimizer state: first/second moment buffers and a
/// step counter that increases by exactly one per applied step.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update applied in place.
///
/// `name` identifies the parameter group in error messages; a non-finite
/// gradient aborts before any state is touched.
pub fn adam_step(
    name: &str,
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: vec![param.len()],
            right: vec![grad.len(), state.m.len()],
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of parameter {name} (element {i}) is {}",
            grad[i]
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for i in 0..param.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Learning rate for an epoch: the base rate divided by 10 for every full
/// hundred epochs elapsed.
pub fn lr_schedule(epoch: usize, base_lr: f64) -> f64 {
    base_lr * 10f64.powi(-((epoch / 100) as i32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        adam_step("p", &mut p, &[0.0], &mut st, 0.1).unwrap();
        assert_eq!(p[0], 1.0);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn single_step_hand_evaluation() {
        // Fresh state, g = 1: m̂ = v̂ = 1, so the update is lr/(1+ε).
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        adam_step("p", &mut p, &[1.0], &mut st, 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-8, "{}", p[0]);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        adam_step("p", &mut p, &[1.0], &mut st, 0.1).unwrap();
        adam_step("p", &mut p, &[1.0], &mut st, 0.1).unwrap();

        // Independent scalar reference, written straight from the update rule.
        let (b1, b2, eps, lr, g) = (0.9, 0.999, 1e-8, 0.1, 1.0);
        let mut theta: f64 = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2u32 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1_pow(b1, t));
            let v_hat = v / (1.0 - b1_pow(b2, t));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert!((p[0] - theta).abs() < 1e-12, "{} vs {theta}", p[0]);

        fn b1_pow(b: f64, t: u32) -> f64 {
            let mut acc = 1.0;
            for _ in 0..t {
                acc *= b;
            }
            acc
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        let msg = adam_step("alpha", &mut p, &[f64::NAN], &mut st, 0.1)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("alpha"), "{msg}");
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn lr_schedule_decays_by_ten_every_hundred_epochs() {
        assert_eq!(lr_schedule(0, 1e-4), 1e-4);
        assert_eq!(lr_schedule(99, 1e-4), 1e-4);
        assert!((lr_schedule(100, 1e-4) - 1e-5).abs() < 1e-20);
        assert!((lr_schedule(250, 1e-4) - 1e-6).abs() < 1e-21);
    }
}
