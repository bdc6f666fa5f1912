//! Momentum gradient descent with an inverse-square-root warmup schedule.

use serde::{Deserialize, Serialize};

use super::params::Weights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            warmup_steps: 100,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    /// Linear ramp to the peak rate, then decay with `1/sqrt(step)`.
    pub fn rate_at(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        let warm = self.warmup_steps.max(1) as f64;
        self.learning_rate * (step / warm).min((warm / step).sqrt())
    }
}

pub struct MomentumSgd {
    pub config: OptimizerConfig,
    velocity: Weights,
    step: usize,
}

impl MomentumSgd {
    pub fn new(config: OptimizerConfig, like: &Weights) -> Self {
        Self {
            config,
            velocity: like.zeros_like(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update; returns the (pre-clip) gradient norm.
    pub fn step(&mut self, weights: &mut Weights, grad: &Weights) -> f64 {
        self.step += 1;
        let norm = grad.l2_norm();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.velocity.scale(self.config.momentum);
        self.velocity.add_scaled(grad, clip);
        weights.add_scaled(&self.velocity, -self.config.rate_at(self.step));
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        let c = OptimizerConfig {
            learning_rate: 1.0,
            warmup_steps: 100,
            ..Default::default()
        };
        assert!((c.rate_at(50) - 0.5).abs() < 1e-12);
        assert!((c.rate_at(100) - 1.0).abs() < 1e-12);
        assert!((c.rate_at(400) - 0.5).abs() < 1e-12);
    }
}
