use super::{GradBundle, MlpParams};
use crate::{Error, Result};

/// Bias-corrected Adam over the flat parameter vector of one MlpParams.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(p: &MlpParams, lr: f64) -> Self {
        let n = p.n_params();
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(s: &mut AdamState, p: &mut MlpParams, g: &GradBundle) -> Result<()> {
    let grad = g.flatten();
    if grad.len() != s.m.len() {
        return Err(Error::Shape(format!(
            "adam_step: grad len {} != state len {}",
            grad.len(),
            s.m.len()
        )));
    }
    let mut flat = p.flatten();
    s.step += 1;
    let t = s.step as f64;
    let bc1 = 1.0 - s.beta1.powf(t);
    let bc2 = 1.0 - s.beta2.powf(t);
    for i in 0..flat.len() {
        s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grad[i];
        s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grad[i] * grad[i];
        let m_hat = s.m[i] / bc1;
        let v_hat = s.v[i] / bc2;
        flat[i] -= s.lr * m_hat / (v_hat.sqrt() + s.eps);
    }
    p.unflatten_into(&flat);
    Ok(())
}
