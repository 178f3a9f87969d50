use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 50, beta_start: 1.5e-3, beta_end: 0.2 }
    }
}

/// Linear-beta variance schedule over `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    /// `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        if config.steps == 0 {
            return Err(Error::Range("schedule needs at least one step".into()));
        }
        if !(0.0 < config.beta_start && config.beta_start <= config.beta_end && config.beta_end < 1.0) {
            return Err(Error::Range(format!("invalid betas {config:?}")));
        }
        let t_max = config.steps;
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        for t in 1..=t_max {
            let frac = if t_max == 1 { 0.0 } else { (t - 1) as f64 / (t_max - 1) as f64 };
            let beta = config.beta_start + frac * (config.beta_end - config.beta_start);
            let prev = alpha_bar[t - 1];
            alpha_bar.push(prev * (1.0 - beta));
        }
        Ok(Self { config, alpha_bar })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.config.steps
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t > self.len() {
            return Err(Error::Range(format!("timestep {t} outside 0..={}", self.len())));
        }
        Ok(())
    }

    /// Coefficients `(sqrt(ab), sqrt(1 - ab))` of the forward process at `t`.
    pub fn coefficients(&self, t: usize) -> (f32, f32) {
        let ab = self.alpha_bar[t];
        (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32)
    }
}
