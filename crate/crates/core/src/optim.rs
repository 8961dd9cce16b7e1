//! Bias-corrected Adam.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::sqrt;
use crate::nn::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter moments for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f32>> = params.params().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Rebuilds a state from saved moments, checking them against `params`.
    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>, params: &ParamSet) -> Result<Self> {
        let sizes: Vec<usize> = params.params().map(|(_, t)| t.numel()).collect();
        let fits = |x: &[Vec<f32>]| x.len() == sizes.len() && x.iter().zip(&sizes).all(|(a, &n)| a.len() == n);
        if !fits(&m) || !fits(&v) {
            return Err(Error::Data("optimizer moments do not match the parameters".into()));
        }
        Ok(Adam { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.v
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Parameters without a gradient are treated as having gradient zero.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for (name, t) in params.params() {
            if t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::Numerical(format!("non-finite gradient for {name}")));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = (1.0 - libm::pow(beta1 as f64, t as f64)) as f32;
        let c2 = (1.0 - libm::pow(beta2 as f64, t as f64)) as f32;
        for ((p, m), v) in params.params_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad().map(<[f32]>::to_vec) else { continue };
            for (((x, m), v), g) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *x -= lr * mhat / (sqrt(vhat) + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
