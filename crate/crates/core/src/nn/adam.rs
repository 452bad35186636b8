use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::Param;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: BTreeMap<String, ArrayD<T>>,
    pub v: BTreeMap<String, ArrayD<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: AdamState { step: 0, m: BTreeMap::new(), v: BTreeMap::new() } }
    }

    /// Advances the step counter. Call once per optimizer step, before [`Adam::update`].
    pub fn begin_step(&mut self) {
        self.state.step += 1;
    }

    /// Applies one bias-corrected update to `param` using its accumulated gradient.
    pub fn update(&mut self, name: &str, param: &mut Param<T>, lr: f64) {
        let c = &self.config;
        let t = self.state.step.max(1) as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let eps = T::lit(c.eps);
        let lr = T::lit(lr);
        let m = self.state.m.entry(name.to_string()).or_insert_with(|| ArrayD::zeros(param.value.raw_dim()));
        let v = self.state.v.entry(name.to_string()).or_insert_with(|| ArrayD::zeros(param.value.raw_dim()));
        ndarray::Zip::from(&mut param.value)
            .and(&param.grad)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
    }
}
