use serde::{Deserialize, Serialize};

use crate::{NnError, ParamStore, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam moments with decoupled (AdamW-style) weight decay.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        OptimizerState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Applies one bias-corrected update. `grads[i]` pairs with parameter `i`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(NnError::shape(
                "adam_step",
                format!("{} grads for {} params", grads.len(), params.len()),
            ));
        }
        self.step += 1;
        let c = self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - c.beta1.powf(self.step as f64));
        let bc2 = T::from_f64(1.0 - c.beta2.powf(self.step as f64));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        let decay = T::from_f64(c.lr * c.weight_decay);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i);
            if g.len() != p.value.len() {
                return Err(NnError::shape(
                    "adam_step",
                    format!("grad {} has {} values for {:?}", p.name, g.len(), p.value.shape()),
                ));
            }
            let apply_decay = p.decay && c.weight_decay != 0.0;
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                if apply_decay {
                    *w = *w - decay * *w;
                }
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("w", Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap(), true);
        s
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut p = store();
        let before = p.clone();
        let mut opt = OptimizerState::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[vec![0.0; 3]]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let mut p = store();
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(cfg, &p);
        opt.step(&mut p, &[vec![3.0, -0.2, 40.0]]).unwrap();
        let moved: Vec<f64> = p
            .get(0)
            .value
            .data()
            .iter()
            .zip([1.0, -2.0, 0.5])
            .map(|(a, b)| a - b)
            .collect();
        for (d, s) in moved.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((d - 0.01 * s).abs() < 1e-8, "{d}");
        }
    }

    #[test]
    fn decoupled_decay_shrinks_weights_with_zero_gradient() {
        let mut p = store();
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(cfg, &p);
        opt.step(&mut p, &[vec![0.0; 3]]).unwrap();
        assert!((p.get(0).value.data()[0] - 0.95).abs() < 1e-12);
    }
}
