//! Adam with bias correction and the one-cycle learning-rate schedule
//! driving the 3-cycle training protocol.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
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
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment buffers plus the step counter.
pub struct Adam<T: Scalar> {
    pub cfg: AdamConfig,
    moments: Vec<MomentPair<T>>,
    step: u64,
}

struct MomentPair<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    /// Moment buffers are laid out against the given parameter list; the
    /// same ordering must be used for every subsequent step.
    pub fn new(cfg: AdamConfig, params: &[(String, Tensor<T>)]) -> Self {
        let moments = params
            .iter()
            .map(|(_, p)| MomentPair {
                m: vec![T::ZERO; p.numel()],
                v: vec![T::ZERO; p.numel()],
            })
            .collect();
        Adam {
            cfg,
            moments,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Resets first/second moments and the bias-correction counter.
    pub fn reset_moments(&mut self) {
        for pair in &mut self.moments {
            pair.m.fill(T::ZERO);
            pair.v.fill(T::ZERO);
        }
        self.step = 0;
    }

    /// Bias-corrected Adam update. Parameters whose gradient is absent
    /// (never touched by backward) are left unchanged.
    pub fn step(&mut self, params: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        if params.len() != self.moments.len() {
            return Err(Error::Config(format!(
                "optimizer built for {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let corr1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let corr2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        let lr_t = T::from_f64(lr);

        for ((name, param), pair) in params.iter().zip(&mut self.moments) {
            let Some(grad) = param.grad() else { continue };
            if grad.len() != pair.m.len() {
                return Err(Error::Config(format!(
                    "moment buffer for {name} has {} entries, gradient has {}",
                    pair.m.len(),
                    grad.len()
                )));
            }
            param.map_data_mut(|data| {
                for i in 0..data.len() {
                    let g = grad[i];
                    pair.m[i] = b1 * pair.m[i] + (T::ONE - b1) * g;
                    pair.v[i] = b2 * pair.v[i] + (T::ONE - b2) * g * g;
                    let m_hat = pair.m[i] / corr1;
                    let v_hat = pair.v[i] / corr2;
                    data[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }

    /// Moment buffers in parameter order, for checkpointing.
    pub fn export_state(&self) -> (u64, Vec<(Vec<T>, Vec<T>)>) {
        (
            self.step,
            self.moments.iter().map(|p| (p.m.clone(), p.v.clone())).collect(),
        )
    }

    pub fn import_state(&mut self, step: u64, moments: Vec<(Vec<T>, Vec<T>)>) -> Result<()> {
        if moments.len() != self.moments.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state holds {} parameters, model has {}",
                moments.len(),
                self.moments.len()
            )));
        }
        for (pair, (m, v)) in self.moments.iter_mut().zip(moments) {
            if m.len() != pair.m.len() || v.len() != pair.v.len() {
                return Err(Error::Checkpoint("optimizer moment shape mismatch".into()));
            }
            pair.m = m;
            pair.v = v;
        }
        self.step = step;
        Ok(())
    }
}

/// One-cycle policy: cosine ramp from `max_lr / div_factor` up to `max_lr`
/// over the first `pct_ramp_up` of a cycle, cosine anneal down to
/// `max_lr / final_div_factor` for the remainder. Cycles repeat identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub pct_ramp_up: f64,
    pub steps_per_cycle: u64,
    pub cycles: u64,
}

impl OneCycleSchedule {
    pub fn new(max_lr: f64, steps_per_cycle: u64, cycles: u64) -> Self {
        OneCycleSchedule {
            max_lr,
            div_factor: 25.0,
            final_div_factor: 1e4,
            pct_ramp_up: 0.3,
            steps_per_cycle,
            cycles,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_lr <= 0.0
            || self.div_factor <= 1.0
            || self.final_div_factor <= 1.0
            || !(0.0 < self.pct_ramp_up && self.pct_ramp_up < 1.0)
            || self.steps_per_cycle == 0
        {
            return Err(Error::Config(format!("invalid one-cycle schedule: {self:?}")));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_cycle * self.cycles
    }

    /// Learning rate at a global step; steps past the last cycle keep the
    /// final cycle's tail value.
    pub fn lr_at(&self, global_step: u64) -> f64 {
        let s = (global_step % self.steps_per_cycle) as f64;
        let ramp = self.pct_ramp_up * self.steps_per_cycle as f64;
        let initial = self.max_lr / self.div_factor;
        let floor = self.max_lr / self.final_div_factor;
        if s <= ramp {
            cosine_interp(initial, self.max_lr, s / ramp)
        } else {
            let t = (s - ramp) / (self.steps_per_cycle as f64 - ramp);
            cosine_interp(self.max_lr, floor, t)
        }
    }
}

/// Half-cosine interpolation from `a` at t=0 to `b` at t=1.
fn cosine_interp(a: f64, b: f64, t: f64) -> f64 {
    b + (a - b) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}
