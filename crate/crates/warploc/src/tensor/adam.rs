//! Adam with bias correction. State is keyed by parameter name so that a
//! checkpoint-restored model keeps its optimizer slots aligned.

use super::{ParameterSet, Scalar, TensorError};

pub struct Adam<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u64,
    slots: Vec<(String, Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Self {
        Self {
            lr,
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter; errors if any parameter is missing
    /// its gradient.
    pub fn step(&mut self, params: &mut ParameterSet<S>) -> Result<(), TensorError> {
        if self.slots.is_empty() {
            for (name, t) in params.iter() {
                self.slots.push((
                    name.to_string(),
                    vec![S::zero(); t.numel()],
                    vec![S::zero(); t.numel()],
                ));
            }
        }
        self.step += 1;
        let bc1 = S::one() - self.beta1.powi(self.step as i32);
        let bc2 = S::one() - self.beta2.powi(self.step as i32);
        let one = S::one();

        for (name, m, v) in &mut self.slots {
            let t = params
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if t.grad().is_none() {
                return Err(TensorError::MissingGrad(name.clone()));
            }
            let n = t.numel();
            debug_assert_eq!(m.len(), n);
            let (data, grad) = t.data_and_grad();
            let grad = grad.expect("checked");
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (one - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (one - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] = data[i] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
