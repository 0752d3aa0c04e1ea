//! Run configuration shared by training and denoising.

pub use crate::snis::EstimateMode;

use crate::error::{CoreError, Result};

/// Knobs for the full train/denoise pipeline with the published defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseConfig {
    /// Number of mixture clusters (M).
    pub clusters: usize,
    /// Generalized Gaussian shape parameter.
    pub beta: f64,
    /// Clean patches drawn per noisy patch (n).
    pub n_samples: usize,
    /// Hard weight threshold tau; weights below ln(tau) are dropped.
    pub tau: f64,
    /// Square patch side; patches have `patch_side^2` pixels.
    pub patch_side: usize,
    /// Patch grid stride at denoising time.
    pub stride: usize,
    /// Patch grid stride for training extraction.
    pub train_stride: usize,
    /// Boosting blend factor r for the second pass.
    pub boost_r: f64,
    /// Denoising passes (1 or 2).
    pub passes: u32,
    /// Base seed for every stochastic stage.
    pub base_seed: u64,
    /// Full-patch overlap averaging or central pixel only.
    pub mode: EstimateMode,
    /// Worker threads; 0 uses the global default.
    pub workers: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            clusters: 20,
            beta: 0.9,
            n_samples: 500,
            tau: 5e-60,
            patch_side: 8,
            stride: 4,
            train_stride: 4,
            boost_r: 0.5,
            passes: 2,
            base_seed: 0,
            mode: EstimateMode::FullPatch,
            workers: 0,
        }
    }
}

impl DenoiseConfig {
    /// Natural log of the weight threshold.
    pub fn log_tau(&self) -> f64 {
        self.tau.ln()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(CoreError::invalid_parameter("clusters", "must be >= 1"));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(CoreError::invalid_parameter("beta", "must be finite and > 0"));
        }
        if self.n_samples == 0 {
            return Err(CoreError::invalid_parameter("samples", "must be >= 1"));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(CoreError::invalid_parameter("tau", "must be finite and > 0"));
        }
        if self.patch_side == 0 {
            return Err(CoreError::invalid_parameter("patch_side", "must be >= 1"));
        }
        for (name, stride) in [("stride", self.stride), ("train_stride", self.train_stride)] {
            if stride == 0 || stride > self.patch_side {
                return Err(CoreError::invalid_parameter(
                    name,
                    format!("must be in 1..={}", self.patch_side),
                ));
            }
        }
        if !self.boost_r.is_finite() || !(0.0..1.0).contains(&self.boost_r) {
            return Err(CoreError::invalid_parameter("r", "must be in [0, 1)"));
        }
        if !(1..=2).contains(&self.passes) {
            return Err(CoreError::invalid_parameter("passes", "must be 1 or 2"));
        }
        Ok(())
    }
}
