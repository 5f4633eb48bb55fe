//! Adam optimizer state and update step.

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Matrix,
    v: Matrix,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, lr: f64) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update, in place. Deterministic: plain
/// elementwise loops, no reordering.
pub fn adam_step(state: &mut AdamState, param: &mut Matrix, grad: &Matrix) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::InvalidArgument(format!(
            "adam_step shapes: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    state.t += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let pd = param.data_mut();
    let md = state.m.data_mut();
    let vd = state.v.data_mut();
    for i in 0..pd.len() {
        let g = grad.data()[i];
        md[i] = b1 * md[i] + (1.0 - b1) * g;
        vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
        let mhat = md[i] / c1;
        let vhat = vd[i] / c2;
        pd[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut st = AdamState::new(2, 2, 0.1);
        let mut p = Matrix::filled(2, 2, 1.5);
        adam_step(&mut st, &mut p, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(p, Matrix::filled(2, 2, 1.5));
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut st = AdamState::new(1, 1, 0.1);
        let mut p = Matrix::zeros(1, 1);
        adam_step(&mut st, &mut p, &Matrix::ones(1, 1)).unwrap();
        assert!((p.get(0, 0) + 0.1).abs() < 1e-6, "got {}", p.get(0, 0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut st = AdamState::new(2, 2, 0.1);
        let mut p = Matrix::zeros(2, 2);
        assert!(adam_step(&mut st, &mut p, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn minimizes_square_and_matches_scalar_reference() {
        // Independent scalar trace of the same update rule.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut xr = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=100u32 {
            let g = 2.0 * xr;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32));
            let vhat = v / (1.0 - b2.powi(t as i32));
            xr -= lr * mhat / (vhat.sqrt() + eps);
            reference.push(xr);
        }

        let mut st = AdamState::new(1, 1, lr);
        let mut p = Matrix::ones(1, 1);
        for &expected in &reference {
            let g = Matrix::filled(1, 1, 2.0 * p.get(0, 0));
            adam_step(&mut st, &mut p, &g).unwrap();
            assert!((p.get(0, 0) - expected).abs() < 1e-12);
        }
        assert!(p.get(0, 0).abs() < 0.05, "ended at {}", p.get(0, 0));
        assert_eq!(st.step_count(), 100);
    }
}
