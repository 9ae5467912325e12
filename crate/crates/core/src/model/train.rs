use e2urec_tensor::{Adam, AdamConfig, Tape, Var};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::forward::{bind, prediction_loss_var, Bound};
use super::params::{ModelParams, TrainMode};
use crate::data::RenderedSample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            patience: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} is not positive", self.learning_rate)));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Adam {
        Adam::new(AdamConfig::with_lr(self.learning_rate))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_losses: Vec<f64>,
    pub valid_losses: Vec<f64>,
    /// 1-based epoch whose weights were kept; 0 means the initial weights.
    pub best_epoch: usize,
    pub steps: u64,
}

/// Builds a loss on a fresh tape, backpropagates and applies one Adam step to
/// the `mode` group. Returns the loss value.
pub fn gradient_step<F>(
    params: &mut ModelParams,
    opt: &mut Adam,
    mode: TrainMode,
    loss_fn: F,
) -> Result<f64>
where
    F: for<'p> FnOnce(&mut Tape<'p>, &Bound<'p>) -> Result<Var>,
{
    let step = opt.steps();
    let (loss, grads) = {
        let mut tape = Tape::new();
        let b = bind(&mut tape, params, Some(mode));
        let loss = loss_fn(&mut tape, &b)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("loss is {value}"),
            });
        }
        let mut g = tape.backward(loss)?;
        let grads = b.trained_grads(&mut g);
        (value, grads)
    };
    if grads.iter().flatten().any(|g| !g.all_finite()) {
        return Err(Error::Training {
            step,
            msg: "non-finite gradient".into(),
        });
    }
    params.apply(opt, mode, &grads)?;
    Ok(loss)
}

/// Seeded epoch order as index batches.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Minimises answer-token cross-entropy with Adam and early stopping on the
/// validation loss; the best checkpoint is restored at the end.
pub fn fit(
    params: &mut ModelParams,
    mode: TrainMode,
    train: &[RenderedSample],
    valid: &[RenderedSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    if mode == TrainMode::Lora && !params.lora_enabled() {
        return Err(Error::Config("adapter training requested without adapters".into()));
    }
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = cfg.optimizer();
    let mut best = (f64::INFINITY, params.clone());
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        let batches = shuffled_batches(train.len(), cfg.batch_size, &mut rng);
        for idx in &batches {
            let batch: Vec<&RenderedSample> = idx.iter().map(|&i| &train[i]).collect();
            sum += gradient_step(params, &mut opt, mode, |t, b| prediction_loss_var(t, b, &batch))?;
        }
        let train_loss = sum / batches.len() as f64;
        let valid_loss = if valid.is_empty() {
            train_loss
        } else {
            params.prediction_loss(valid)?
        };
        debug!("epoch {epoch}: train {train_loss:.4} valid {valid_loss:.4}");
        report.train_losses.push(train_loss);
        report.valid_losses.push(valid_loss);
        if valid_loss < best.0 {
            best = (valid_loss, params.clone());
            report.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                info!("early stop after epoch {epoch}, best epoch {}", report.best_epoch);
                break;
            }
        }
    }
    report.steps = opt.steps();
    *params = best.1;
    Ok(report)
}

/// Initialises a model from `seed` and trains every base weight.
pub fn train_original(
    config: &ModelConfig,
    train: &[RenderedSample],
    valid: &[RenderedSample],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    let mut params = ModelParams::init(config, cfg.seed)?;
    let report = fit(&mut params, TrainMode::Full, train, valid, cfg)?;
    Ok((params, report))
}
