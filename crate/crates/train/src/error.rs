use thiserror::Error;

use mvweak_core::CoreError;
use mvweak_model::ModelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite {what} loss ({value}) in {phase} training at epoch {epoch}, step {step}")]
    NonFinite {
        phase: &'static str,
        what: &'static str,
        epoch: usize,
        step: usize,
        value: f64,
    },

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;
