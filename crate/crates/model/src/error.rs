use thiserror::Error;

use mvweak_core::CoreError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape error in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("{0}")]
    Invalid(String),

    #[error("tie-free point not found after {attempts} attempts (smallest gap {best_gap:e})")]
    TieResampling { attempts: usize, best_gap: f64 },

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl ModelError {
    pub fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        ModelError::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
