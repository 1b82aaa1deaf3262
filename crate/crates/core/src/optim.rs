use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Param, Real};

fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "adam".into(),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name != "adam" {
            return Err(Error::Config(format!("unsupported optimizer `{}`", self.name)));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam needs lr > 0, betas in [0,1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: OptimizerConfig,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Drops both moment estimates and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: Vec<&mut Param<T>>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed under the optimizer");
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = Param::new(vec![1.0f64, -1.0]);
        p.grad = vec![0.5, -3.0];
        let mut opt = Adam::new(OptimizerConfig::default());
        opt.step(vec![&mut p]);
        assert!((p.value[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.value[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new(vec![3.0f64]);
        let mut opt = Adam::new(OptimizerConfig {
            lr: 0.1,
            ..OptimizerConfig::default()
        });
        for _ in 0..500 {
            p.grad[0] = 2.0 * (p.value[0] - 1.0);
            opt.step(vec![&mut p]);
        }
        assert!((p.value[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(OptimizerConfig {
            lr: 0.0,
            ..OptimizerConfig::default()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            name: "sgd".into(),
            ..OptimizerConfig::default()
        }
        .validate()
        .is_err());
    }
}
