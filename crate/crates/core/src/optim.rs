//! Adam with bias correction, inverse-square-root learning-rate decay after
//! linear warmup, and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate reached at the end of warmup.
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Learning rate at step 0; interpolated linearly up to `peak_lr`.
    pub warmup_init_lr: f64,
    /// Gradients are rescaled so their global L2 norm never exceeds this.
    pub clip_norm: f64,
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..1.0).contains(&v);
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::InvalidParam(format!(
                "Adam betas ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 || self.clip_norm <= 0.0 || self.peak_lr < 0.0 {
            return Err(Error::InvalidParam(
                "Adam eps and clip norm must be positive, peak learning rate non-negative"
                    .into(),
            ));
        }
        if self.warmup_init_lr < 0.0 || self.warmup_init_lr > self.peak_lr {
            return Err(Error::InvalidParam(format!(
                "warmup initial learning rate {} must lie in [0, peak {}]",
                self.warmup_init_lr, self.peak_lr
            )));
        }
        Ok(())
    }

    /// Scheduled learning rate at 1-based step `t`: linear warmup from
    /// `warmup_init_lr` to `peak_lr` over `warmup_steps`, then
    /// `peak_lr * sqrt(warmup_steps / t)`. With zero warmup the schedule is
    /// `peak_lr / sqrt(t)`, so step 1 uses the peak rate.
    pub fn lr_at(&self, t: u64) -> f64 {
        debug_assert!(t >= 1, "steps are 1-based");
        let w = self.warmup_steps;
        if t <= w {
            self.warmup_init_lr + (self.peak_lr - self.warmup_init_lr) * t as f64 / w as f64
        } else {
            self.peak_lr * (w.max(1) as f64 / t as f64).sqrt()
        }
    }
}

struct Moment {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// What one optimizer step did, for logging.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub step: u64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<Moment>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, param_sizes: &[usize]) -> Result<Self> {
        Self::resumed(cfg, param_sizes, 0)
    }

    /// Fresh moments but a step counter continuing from `steps_taken`,
    /// so the learning-rate schedule picks up where a previous run stopped.
    pub fn resumed(cfg: AdamConfig, param_sizes: &[usize], steps_taken: u64) -> Result<Self> {
        cfg.validate()?;
        let moments = param_sizes
            .iter()
            .map(|&n| Moment {
                m: vec![0.0; n],
                v: vec![0.0; n],
            })
            .collect();
        Ok(Adam {
            cfg,
            step: steps_taken,
            moments,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Number of steps applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update in place. `grads` must parallel `params` in order
    /// and size. Non-finite gradients abort with a training error.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<StepInfo> {
        if params.len() != self.moments.len() || grads.len() != self.moments.len() {
            return Err(Error::Contract(format!(
                "optimizer built for {} parameter groups, given {} params / {} grads",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), mo) in params.iter().zip(grads).zip(&self.moments) {
            if p.numel() != g.len() || p.numel() != mo.m.len() {
                return Err(Error::Contract(format!(
                    "parameter of {} elements paired with gradient of {} (optimizer slot holds {})",
                    p.numel(),
                    g.len(),
                    mo.m.len()
                )));
            }
        }
        let t = self.step + 1;
        let mut sq_sum = 0.0;
        for g in grads {
            for &v in g {
                sq_sum += v * v;
            }
        }
        if !sq_sum.is_finite() {
            return Err(Error::Training {
                step: t,
                reason: "non-finite gradient".into(),
            });
        }
        let grad_norm = sq_sum.sqrt();
        let clipped = grad_norm > self.cfg.clip_norm;
        let scale = if clipped {
            self.cfg.clip_norm / grad_norm
        } else {
            1.0
        };
        let lr = self.cfg.lr_at(t);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for ((p, g), mo) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g[i] * scale;
                mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * gi;
                mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * gi * gi;
                let m_hat = mo.m[i] / bc1;
                let v_hat = mo.v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        self.step = t;
        Ok(StepInfo {
            step: t,
            lr,
            grad_norm,
            clipped,
        })
    }
}
