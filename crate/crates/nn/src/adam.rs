use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use crate::{ParamSet, Real};

/// Adam hyper-parameters. The learning rate is supplied per step so callers
/// can apply their own decay schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Bias-corrected Adam over a named parameter set.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: ParamSet<T>,
    pub second_moment: ParamSet<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Apply one update to every parameter that has a gradient entry.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) {
        self.step += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let eps = T::lit(self.config.eps);
        let lr = T::lit(lr);
        let c1 = T::one() - T::lit(self.config.beta1.powi(self.step as i32));
        let c2 = T::one() - T::lit(self.config.beta2.powi(self.step as i32));
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            Zip::from(p).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}
