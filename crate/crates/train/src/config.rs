use mvweak_core::data::FrameLabelMatrix;
use mvweak_core::Tensor;
use mvweak_model::TripletParams;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

/// Optimizer and schedule settings shared by base and downstream training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Sequences per step (`K`).
    pub batch_size: usize,
    /// Weight on the summed per-view latent losses.
    pub lambda_latent: f64,
    pub triplet: TripletParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-7,
            epochs: 100,
            batch_size: 8,
            lambda_latent: 1.0,
            triplet: TripletParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad("eps must be > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lambda_latent >= 0.0) {
            return bad("lambda_latent must be >= 0".into());
        }
        self.triplet.validate()?;
        Ok(())
    }

    /// Base training mines triplets inside a batch, so it needs `K >= 2`.
    pub fn validate_base(&self) -> Result<()> {
        self.validate()?;
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!(
                "base training needs batch_size >= 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Frame-level downstream task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// One output per frame: is any action present.
    Detection,
    /// One output per class per frame.
    Recognition,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Detection => "detection",
            Task::Recognition => "recognition",
        }
    }

    pub fn num_outputs(self, num_classes: usize) -> usize {
        match self {
            Task::Detection => 1,
            Task::Recognition => num_classes,
        }
    }

    /// `T x C_task` training targets.
    pub fn targets(self, labels: &FrameLabelMatrix) -> Tensor<f32> {
        match self {
            Task::Detection => labels.any_action().to_tensor(),
            Task::Recognition => labels.to_tensor(),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detection" => Ok(Task::Detection),
            "recognition" => Ok(Task::Recognition),
            _ => Err(TrainError::Config(format!("unknown task {s:?} (detection or recognition)"))),
        }
    }
}
