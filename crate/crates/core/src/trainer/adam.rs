use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Bias-corrected Adam step; `step` counts from 1.
pub fn adam_update(param: &mut [f64], grad: &[f64], moments: &mut Moments, rate: f64, step: u64, config: &AdamConfig) {
    assert_eq!(param.len(), grad.len());
    assert_eq!(param.len(), moments.len());
    assert!(step >= 1);
    let AdamConfig { beta1, beta2, eps } = *config;
    let c1 = 1.0 - beta1.powf(step as f64);
    let c2 = 1.0 - beta2.powf(step as f64);
    for ((p, &g), (m, v)) in param.iter_mut().zip(grad).zip(moments.m.iter_mut().zip(moments.v.iter_mut())) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= rate * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
}
