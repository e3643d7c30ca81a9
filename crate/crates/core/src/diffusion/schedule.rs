use serde::{Deserialize, Serialize};

use crate::error::{bail_input, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Upper bound on alpha_bar / (1 - alpha_bar) at the last step.
    pub max_final_snr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 0.0015,
            beta_end: 0.0195,
            max_final_snr: 1e-3,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        let s = build_schedule(self.timesteps, self.beta_start, self.beta_end)?;
        if !(s.final_snr() < self.max_final_snr) {
            bail_input!(
                "final signal-to-noise {:.3e} not below {:.3e}; raise beta_end or timesteps",
                s.final_snr(),
                self.max_final_snr
            );
        }
        Ok(s)
    }

    /// Shorter chain with proportionally larger betas, used for CPU-budget runs.
    pub fn desk() -> Self {
        Self {
            timesteps: 100,
            beta_start: 0.015,
            beta_end: 0.195,
            ..Self::default()
        }
    }
}

/// Per-timestep noise coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Scaled-linear schedule: `sqrt(beta)` is linear in `t` between the endpoints.
pub fn build_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if timesteps < 2 {
        bail_input!("need at least 2 timesteps, got {timesteps}");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        bail_input!("need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})");
    }
    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
    let last = (timesteps - 1) as f64;
    let betas: Vec<f64> = (0..timesteps)
        .map(|t| {
            if t == 0 {
                beta_start
            } else if t == timesteps - 1 {
                beta_end
            } else {
                let r = a + (t as f64 / last) * (b - a);
                r * r
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(DiffusionSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl DiffusionSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Variance of q(x_{t-1} | x_t, x_0); zero at t = 0.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
        }
    }

    /// Signal-to-noise ratio alpha_bar / (1 - alpha_bar) at the last step.
    pub fn final_snr(&self) -> f64 {
        let ab = *self.alpha_bars.last().expect("nonempty schedule");
        ab / (1.0 - ab)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            bail_input!("timestep {t} outside [0, {})", self.len());
        }
        Ok(())
    }
}
