//! Decoder-only transformer click recommender with low-rank adapters.

mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;
pub mod train;

pub use config::{LoraTarget, ModelConfig};
pub use forward::{
    bind, last_logits, p_click_from_logits, mean_nll, prediction_loss_var, Bound, ClickScorer, KlSpace,
    LogitRecord,
};
pub use params::{ModelParams, ParamCount, TrainMode};
pub use train::{fit, gradient_step, shuffled_batches, train_original, TrainConfig, TrainReport};
