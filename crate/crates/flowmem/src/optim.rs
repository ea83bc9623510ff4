//! Adam optimizer with bias-corrected moments.

use crate::error::{Error, Result};
use crate::model::MlpVelocityModel;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// First/second moment buffers, one pair per parameter tensor.
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(model: &MlpVelocityModel, learning_rate: f64) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
        Ok(AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently stored on the model's
    /// parameters. Gradients are consumed (cleared) by the update.
    pub fn step(&mut self, model: &mut MlpVelocityModel) -> Result<()> {
        let mut params = model.params_mut();
        if params.len() != self.m.len() {
            return Err(Error::State(
                "optimizer state does not match model parameters".into(),
            ));
        }
        for p in params.iter() {
            if p.grad().is_none() {
                return Err(Error::State(
                    "adam step requires gradients on every parameter".into(),
                ));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, p) in params.iter_mut().enumerate() {
            let g = p.grad().unwrap().to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            p.clear_grad();
        }
        model.train_steps += 1;
        Ok(())
    }
}
