use crate::error::{Error, Result};

use super::matrix::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment accumulators for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[Matrix] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Matrix] {
        &self.v
    }
}

/// One Adam update with coupled L2 regularization (`g + λθ`).
pub fn adam_step(
    params: &mut [Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let theta = p.data_mut();
        for i in 0..theta.len() {
            let grad = g.data()[i] + weight_decay * theta[i];
            let mi = &mut m.data_mut()[i];
            *mi = BETA1 * *mi + (1.0 - BETA1) * grad;
            let vi = &mut v.data_mut()[i];
            *vi = BETA2 * *vi + (1.0 - BETA2) * grad * grad;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
