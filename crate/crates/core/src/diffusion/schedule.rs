use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};
use crate::Error;

/// Linear-beta DDPM schedule. Timesteps are 1-based: `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(skip)]
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02)
    }
}

impl NoiseSchedule {
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut s = Self {
            train_steps,
            beta_start,
            beta_end,
            alpha_bars: Vec::new(),
        };
        s.rebuild();
        s
    }

    /// Recompute the cumulative products (after deserialising).
    pub fn rebuild(&mut self) {
        let mut acc = 1.0;
        self.alpha_bars = self
            .betas()
            .into_iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
    }

    pub fn betas(&self) -> Vec<f64> {
        let n = self.train_steps;
        (0..n)
            .map(|i| {
                if n == 1 {
                    self.beta_start
                } else {
                    self.beta_start + (self.beta_end - self.beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.betas().into_iter().map(|b| 1.0 - b).collect()
    }

    /// `alpha_bar(t)`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<(), Error> {
        if t == 0 || t > self.train_steps {
            return Err(Error::Config(format!(
                "timestep {t} outside [1, {}]",
                self.train_steps
            )));
        }
        Ok(())
    }

    /// Closed-form forward process `sqrt(ab) z0 + sqrt(1 - ab) eps`.
    pub fn q_sample<E: Element>(&self, z0: &Tensor<E>, t: usize, eps: &Tensor<E>) -> Result<Tensor<E>, Error> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (E::lit(ab.sqrt()), E::lit((1.0 - ab).sqrt()));
        Ok(z0.zip_map(eps, |z, e| a * z + b * e)?)
    }

    /// `inference_steps` evenly spaced timesteps in increasing order, the
    /// last one equal to `T`.
    pub fn timestep_grid(&self, inference_steps: usize) -> Vec<usize> {
        let t = self.train_steps;
        (1..=inference_steps)
            .map(|k| ((k * t) as f64 / inference_steps as f64).round().max(1.0) as usize)
            .collect()
    }
}
