//! Adam optimizer with bias correction.

use crate::error::{Error, Result};

/// A named parameter tensor living outside any graph. Each training step
/// inserts these as graph leaves, reads gradients back out, and applies the
/// optimizer update in place.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), shape.iter().product::<usize>());
        ParamTensor {
            name: name.into(),
            shape,
            values,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment accumulators, one pair per parameter tensor.
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    hp: AdamParams,
}

impl AdamState {
    pub fn new(params: &[ParamTensor], hp: AdamParams) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            hp,
        }
    }

    /// One update over all parameter tensors. `grads[i]` must align with
    /// `params[i]`; a missing gradient is an error.
    pub fn step(&mut self, params: &mut [ParamTensor], grads: &[Option<&[f64]>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(
                "adam_step: parameter/gradient count mismatch".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.hp.beta1.powi(t);
        let bc2 = 1.0 - self.hp.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].ok_or_else(|| {
                Error::InvalidArgument(format!("adam_step: missing gradient for {}", p.name))
            })?;
            if g.len() != p.numel() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("gradient length {} != {} for {}", g.len(), p.numel(), p.name),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = self.hp.beta1 * m[j] + (1.0 - self.hp.beta1) * g[j];
                v[j] = self.hp.beta2 * v[j] + (1.0 - self.hp.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.values[j] -= self.hp.lr * m_hat / (v_hat.sqrt() + self.hp.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![ParamTensor::new("w", vec![3], vec![1.0, -2.0, 0.5])];
        let before = params[0].values.clone();
        let mut adam = AdamState::new(&params, AdamParams::default());
        let zeros = vec![0.0; 3];
        adam.step(&mut params, &[Some(&zeros)]).unwrap();
        assert_eq!(params[0].values, before);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_almost_lr() {
        // Closed form: m_hat = v_hat = 1 after bias correction, so the move
        // is lr / (1 + eps) regardless of beta values.
        let hp = AdamParams::default();
        let mut params = vec![ParamTensor::new("w", vec![1], vec![0.0])];
        let mut adam = AdamState::new(&params, hp);
        let g = vec![1.0];
        adam.step(&mut params, &[Some(&g)]).unwrap();
        let expected = -hp.lr / (1.0 + hp.eps);
        assert!((params[0].values[0] - expected).abs() < 1e-15);
        assert!((params[0].values[0] + hp.lr).abs() < 1e-10);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = vec![ParamTensor::new("w", vec![1], vec![0.0])];
        let mut adam = AdamState::new(&params, AdamParams::default());
        assert!(adam.step(&mut params, &[None]).is_err());
    }
}
