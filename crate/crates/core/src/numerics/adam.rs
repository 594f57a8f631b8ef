use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam optimizer state with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state for parameters of the given element counts.
    pub fn new(learning_rate: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update of `params` in place from `grads`.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[i].len() {
                return Err(Error::Shape(format!(
                    "adam: parameter {i} has {} values, gradient {}, moments {}",
                    p.len(),
                    g.len(),
                    self.first_moment[i].len()
                )));
            }
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} at element {bad} is {}; aborting update",
                    g[bad]
                )));
            }
        }
        if !(self.learning_rate >= 0.0 && self.beta1 > 0.0 && self.beta2 > 0.0 && self.epsilon > 0.0)
        {
            return Err(Error::Config("adam hyperparameters must be positive".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(0.1, [3]);
        st.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        // m = 0.1, v = 0.001, m̂ = v̂ = 1 → Δ = -lr / (1 + ε)
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(0.1, [1]);
        st.step(&mut [&mut p], &[&[1.0]]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new(0.1, [1]);
        let err = st.step(&mut [&mut p], &[&[f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p.item(), 1.0);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
            let mut st = AdamState::new(0.01, [2]);
            for k in 0..50 {
                let g = [(k as f64).sin(), (k as f64 * 0.3).cos()];
                st.step(&mut [&mut p], &[&g]).unwrap();
            }
            p.into_data()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
