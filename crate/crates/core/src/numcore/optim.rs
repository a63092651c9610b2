use std::collections::BTreeMap;

use super::Parameter;

/// Adam hyperparameters other than the learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moments and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Bias-corrected Adam keyed by parameter name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Apply one update to every non-frozen parameter that holds a gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>, lr: f64) {
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for p in params {
            if p.frozen {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let n = p.tensor.numel();
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            let data = p.tensor.data_mut();
            for i in 0..n {
                let g = grad.data()[i] + weight_decay * data[i];
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let mh = st.m[i] / bc1;
                let vh = st.v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn param(vals: Vec<f64>, grad: Vec<f64>) -> Parameter {
        let mut p = Parameter::new("w", Tensor::vector(vals));
        p.grad = Some(Tensor::vector(grad));
        p
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut opt = Adam::new(AdamConfig {
            eps: 0.0,
            ..Default::default()
        });
        let mut p = param(vec![1.0, 1.0, 1.0], vec![0.3, -5.0, 1e-3]);
        opt.step([&mut p], 0.01);
        let want = [0.99, 1.01, 0.99];
        for (a, b) in p.tensor.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = param(vec![0.5, -2.0], vec![0.0, 0.0]);
        opt.step([&mut p], 0.1);
        assert_eq!(p.tensor.data(), &[0.5, -2.0]);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = param(vec![0.1, 0.2], vec![4.0, -4.0]);
        p.frozen = true;
        let before = p.tensor.clone();
        for _ in 0..10 {
            opt.step([&mut p], 1.0);
        }
        assert_eq!(p.tensor, before);
        assert!(opt.state.is_empty());
    }
}
