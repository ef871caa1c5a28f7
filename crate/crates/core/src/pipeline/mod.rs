//! Training, inference, checkpoints and the ablation / layer-sweep harness.

mod checkpoint;
mod harness;
mod infer;
mod model;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::mixup::MixupConfig;
use crate::objectives::TaskKind;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use harness::{ablate, ablation_rows, sweep_layer, AblationRow, SweepRow};
pub use infer::{
    argmax, average_probs, evaluate, infer_classification, infer_token, pair_representations, EvalReport,
    TokenPrediction,
};
pub use model::{
    forward_pair, forward_single, head, init_model, task_loss, Model, ModelVars, PairOutput, StreamOutput, HEAD_B,
    HEAD_W, MIX_B, MIX_W,
};
pub use optim::{Adam, AdamConfig};
pub use train::{metrics_csv, train, write_metrics_csv, EpochMetrics, TrainOutput};

/// Switches for every component of the method.
///
/// With `use_mixup` off the run is plain translate-train: source and
/// translated target examples are trained as independent single-stream
/// inputs and every other switch has no effect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub use_mixup: bool,
    pub mixup_inference: bool,
    pub scheduled_sampling: bool,
    pub mse_consistency: bool,
    pub kl_consistency: bool,
    /// Fix `λ = λ₀` instead of the entropy gate.
    pub constant_lambda: bool,
    /// Take the target representation for the MSE term from the mixed stream.
    pub mse_on_mixed: bool,
}

impl Toggles {
    pub fn full() -> Self {
        Toggles {
            use_mixup: true,
            mixup_inference: true,
            scheduled_sampling: true,
            mse_consistency: true,
            kl_consistency: true,
            constant_lambda: false,
            mse_on_mixed: true,
        }
    }

    pub fn all_off() -> Self {
        Toggles {
            use_mixup: false,
            mixup_inference: false,
            scheduled_sampling: false,
            mse_consistency: false,
            kl_consistency: false,
            constant_lambda: false,
            mse_on_mixed: false,
        }
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::full()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub encoder: EncoderConfig,
    pub mixup: MixupConfig,
    /// Weight of the source task loss.
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub toggles: Toggles,
}

impl TrainConfig {
    /// Defaults for a task family, including its `α` and scheduled-sampling `k`.
    pub fn for_task(task: TaskKind) -> Self {
        TrainConfig {
            task,
            encoder: EncoderConfig::default(),
            mixup: MixupConfig {
                schedule_k: task.default_schedule_k(),
                ..MixupConfig::default()
            },
            alpha: task.default_alpha(),
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 5,
            seed: 0,
            toggles: Toggles::full(),
        }
    }

    /// The same run as plain translate-train.
    pub fn baseline(&self) -> Self {
        TrainConfig {
            toggles: Toggles::all_off(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mixup.validate()?;
        if self.toggles.use_mixup && self.mixup.mix_layer.is_none() {
            return Err(Error::invalid("use_mixup needs a mix_layer"));
        }
        if let Some(l) = self.mixup.mix_layer {
            if l == 0 || l > self.encoder.num_layers {
                return Err(Error::invalid(format!(
                    "mix_layer {l} outside [1, {}]",
                    self.encoder.num_layers
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }

    /// Whether training and inference actually mix the two streams.
    pub fn mixing(&self) -> bool {
        self.toggles.use_mixup
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_task(TaskKind::Classification)
    }
}
