//! Named parameters and the Adam optimizer.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use super::{sample_normal, Result, Tensor, TensorError};

/// A named, grad-tracked tensor owned by a model.
///
/// Names are unique within a model and double as checkpoint keys.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: &[usize], trainable: bool) -> Self {
        Parameter {
            name: name.into(),
            tensor: Tensor::leaf(data, shape, trainable),
            trainable,
        }
    }

    /// Entries drawn from N(0, std^2).
    pub fn randn(
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| sample_normal(rng, std)).collect();
        Parameter::new(name, data, shape, trainable)
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize], trainable: bool) -> Self {
        Parameter::new(name, vec![0.0; shape.iter().product()], shape, trainable)
    }

    pub fn ones(name: impl Into<String>, shape: &[usize], trainable: bool) -> Self {
        Parameter::new(name, vec![1.0; shape.iter().product()], shape, trainable)
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction (β1=0.9, β2=0.999, ε=1e-8 unless overridden).
///
/// Moment buffers are keyed by parameter name, so the same optimizer instance
/// can be stepped with different parameter subsets (e.g. per training phase).
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every given parameter, then zero their gradients.
    ///
    /// Errors if a parameter has no gradient; pass only the parameters that
    /// participated in the current loss.
    pub fn step(&mut self, params: &[&Parameter]) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for p in params {
            let grad = p.tensor.grad().ok_or_else(|| TensorError::MissingGradient {
                name: p.name.clone(),
            })?;
            let entry = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let mut data = p.tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                entry.m[i] = self.beta1 * entry.m[i] + (1.0 - self.beta1) * g;
                entry.v[i] = self.beta2 * entry.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = entry.m[i] / bc1;
                let v_hat = entry.v[i] / bc2;
                data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            drop(data);
            p.tensor.zero_grad();
        }
        Ok(())
    }
}

/// Drop accumulated gradients on every parameter.
pub fn zero_grads(params: &[&Parameter]) {
    for p in params {
        p.tensor.zero_grad();
    }
}

/// Allocate an all-zero gradient on parameters the current loss did not
/// reach (a loss independent of a parameter has zero gradient there), so a
/// fixed parameter set can be stepped even when some terms are skipped,
/// e.g. the corruption loss on a single-domain batch.
pub fn ensure_grads(params: &[&Parameter]) {
    for p in params {
        p.tensor.accumulate_grad(|_| {});
    }
}

/// Validation pass: error on any NaN/Inf entry, naming the parameter.
pub fn check_finite(params: &[&Parameter]) -> Result<()> {
    for p in params {
        if p.tensor.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                name: p.name.clone(),
            });
        }
    }
    Ok(())
}
