//! Two-stage training of the post-filter: losses, the embedding loss
//! provider, reverse-mode gradients (via [`crate::model::backward`]), Adam
//! and the plateau schedule.

mod data;
mod embedding;
mod losses;
mod optim;
mod trainer;

pub use data::{load_manifest_examples, FrontEnd, TrainExample};
pub use embedding::{EmbeddingProvider, ProxyEmbedding, SpectralInput};
pub use losses::{bark_gain_loss, bark_gain_loss_grad, ssl_loss, ssl_loss_grad, stage_loss, BCE_CLAMP, GAIN_COMPRESSION};
pub use optim::{adam_step, AdamState, LrSchedule, ScheduleConfig, ScheduleStep};
pub use trainer::{
    batch_objective, split_indices, train, update_running_stats, write_history_csv, EpochRecord, Metrics, StageConfig, TrainAbort,
    TrainConfig, TrainOutcome,
};

use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training integrity: non-finite gradient in layer `{0}`")]
    Integrity(String),
    /// Unreadable manifest or audio.
    #[error("training data: {0}")]
    Data(String),
    #[error("loss diverged in stage {stage} epoch {epoch}")]
    Diverged { stage: u8, epoch: usize },
}

/// Training stage: 1 = embedding loss only, 2 = Bark-gain + embedding loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    /// `(w_bark, w_ssl)` of the stage objective.
    pub fn weights(self) -> (f64, f64) {
        match self {
            Stage::One => (0.0, 1.0),
            Stage::Two => (10.0, 0.5),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = TrainError;

    fn try_from(v: u8) -> Result<Self, TrainError> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(TrainError::Contract(format!("stage must be 1 or 2, got {v}"))),
        }
    }
}
