use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters and switches for one training run.
///
/// The defaults follow the reference settings: learning rate `5e-5`, batch
/// 32, Beta parameter 0.2, trade-off 0.01, momentum 0.95, mixing coefficient
/// 0.5 and 5000 iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// `gamma ~ Beta(alpha, alpha)` for distribution mixup and input mixup.
    pub alpha: f64,
    /// Weight of the distribution-level loss.
    pub beta: f64,
    pub rho: f64,
    pub lambda_mix: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub stats_dim: usize,
    /// Validation accuracy is measured (and a log row written) every this many steps.
    pub eval_every: usize,
    /// Hold the distribution loss off until one epoch has passed and every
    /// bank cell has been observed; bandwidths are frozen at that point.
    pub warmup: bool,
    pub use_dist_loss: bool,
    pub use_dist_mixup: bool,
    /// Resample pseudo-instances from the Universum-mixed cells.
    pub use_resample: bool,
    /// Plain input-space mixup on the real batch (the ERM+Mixup baseline).
    pub input_mixup: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            batch_size: 32,
            alpha: 0.2,
            beta: 1e-2,
            rho: 0.95,
            lambda_mix: 0.5,
            max_iters: 5000,
            seed: 0,
            hidden_dim: 32,
            latent_dim: 16,
            stats_dim: 16,
            eval_every: 100,
            warmup: true,
            use_dist_loss: true,
            use_dist_mixup: true,
            use_resample: true,
            input_mixup: false,
        }
    }
}

impl TrainConfig {
    /// Plain empirical risk minimization: only the real-instance loss.
    pub fn erm(self) -> Self {
        TrainConfig { use_dist_loss: false, use_dist_mixup: false, use_resample: false, input_mixup: false, ..self }
    }

    pub fn erm_mixup(self) -> Self {
        TrainConfig { input_mixup: true, ..self.erm() }
    }

    /// Whether the encoder statistics and the bank are needed at all.
    pub fn uses_stats(&self) -> bool {
        self.use_dist_loss || self.use_resample
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if !(self.lambda_mix > 0.0 && self.lambda_mix < 1.0) {
            return bad(format!("lambda_mix must lie in (0, 1), got {}", self.lambda_mix));
        }
        if self.hidden_dim == 0 || self.latent_dim == 0 || self.stats_dim == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.input_mixup && self.uses_stats() {
            return bad("input mixup is a baseline and cannot be combined with the distribution terms".into());
        }
        Ok(())
    }
}
