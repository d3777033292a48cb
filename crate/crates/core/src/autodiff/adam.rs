use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam moments for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 1e-2;

    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr: f64) -> Self {
        let shapes: Vec<Vec<usize>> = params.into_iter().map(|p| p.shape().to_vec()).collect();
        let zeros = |s: &Vec<usize>| vec![0.0; s.iter().product()];
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: shapes.iter().map(zeros).collect(),
            second: shapes.iter().map(zeros).collect(),
            shapes,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over `params` in place, then zeroes their gradients.
/// Parameters without a gradient slot are left untouched.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.shapes.len() {
        return Err(Error::Dimension(format!(
            "optimizer tracks {} parameters, got {}",
            state.shapes.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.shape() != state.shapes[i].as_slice() {
            return Err(Error::Dimension(format!(
                "parameter {i}: shape {:?} but moments were built for {:?}",
                p.shape(),
                state.shapes[i]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (values, grad) = p.data_and_grad_mut();
        let Some(grad) = grad else { continue };
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for j in 0..values.len() {
            let g = grad[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            values[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
            grad[j] = 0.0;
        }
    }
    Ok(())
}
