use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::{Error, Real, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::LengthMismatch { left: params.len(), right: grads.len() });
    }
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    state.t += 1;
    let c1 = 1.0 - Float::powi(BETA1, state.t as i32);
    let c2 = 1.0 - Float::powi(BETA2, state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let g = g.as_f64();
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let step = lr * (*m / c1) / (Float::sqrt(*v / c2) + EPSILON);
        *p = T::from_f64(p.as_f64() - step);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = [1.0f64, -2.0];
        let mut s = AdamState::new(2);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        }
        assert_eq!(p, [1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = [0.0f64, 0.0];
        let mut s = AdamState::new(2);
        for _ in 0..50 {
            adam_step(&mut p, &[2.0, -0.5], &mut s, 0.01).unwrap();
        }
        assert!(p[0] < 0.0 && p[1] > 0.0);
    }

    #[test]
    fn first_step_matches_hand_calculation() {
        // m1 = 0.1 g, v1 = 0.001 g^2; bias correction gives m^ = g, v^ = g^2
        let g = 0.3;
        let mut p = [1.0f64];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[g], &mut s, 0.05).unwrap();
        let expected = 1.0 - 0.05 * g / (g.abs() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }
}
