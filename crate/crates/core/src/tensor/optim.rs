use super::ParamStore;
use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// SGD or bias-corrected Adam over a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            kind,
            learning_rate,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.requires_grad && p.grad.is_none()) {
            return Err(Error::Contract(format!(
                "parameter '{}' has no gradient; run backward before stepping",
                p.name
            )));
        }
        if self.kind == OptimizerKind::Adam && self.first_moment.is_empty() {
            self.first_moment = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if !self.first_moment.is_empty() && self.first_moment.len() != store.len() {
            return Err(Error::Contract(
                "optimizer moments were built for a different parameter set".into(),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = self.learning_rate;
        let (bc1, bc2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));

        for (i, p) in store.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.as_mut().expect("checked above");
            let values = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, g) in values.iter_mut().zip(grad.iter()) {
                        *v -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, s) = (&mut self.first_moment[i], &mut self.second_moment[i]);
                    for (k, (v, g)) in values.iter_mut().zip(grad.iter()).enumerate() {
                        m[k] = BETA1 * m[k] + (1.0 - BETA1) * g;
                        s[k] = BETA2 * s[k] + (1.0 - BETA2) * g * g;
                        let m_hat = m[k] / bc1;
                        let s_hat = s[k] / bc2;
                        *v -= lr * m_hat / (s_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(value: f64, grad: f64, n: usize) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::full(&[n], value));
        s.get_mut(id).grad = Some(vec![grad; n]);
        s
    }

    #[test]
    fn sgd_step_by_hand() {
        let mut s = store_with(1.0, 2.0, 1);
        Optimizer::sgd(0.1).unwrap().step(&mut s).unwrap();
        let p = s.iter().next().unwrap();
        assert!((p.value.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut s = store_with(0.37, 0.0, 4);
            let before = s.clone();
            let mut opt = Optimizer::new(kind, 0.01).unwrap();
            for _ in 0..3 {
                opt.step(&mut s).unwrap();
            }
            assert_eq!(s.iter().next().unwrap().value, before.iter().next().unwrap().value);
        }
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let lr = 0.003;
        let mut s = store_with(0.5, 1.0, 5);
        let mut opt = Optimizer::adam(lr).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(opt.step_count(), 1);
        for &v in s.iter().next().unwrap().value.data() {
            let delta = v - 0.5;
            assert!((delta + lr).abs() < 1e-6, "{delta}");
        }
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = ParamStore::new();
        s.add("decoder.w", Tensor::zeros(&[2]));
        let err = Optimizer::sgd(0.1).unwrap().step(&mut s).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(err.to_string().contains("decoder.w"));
    }

    #[test]
    fn rejects_non_positive_rate() {
        assert!(Optimizer::sgd(0.0).is_err());
        assert!(Optimizer::adam(-1.0).is_err());
    }
}
