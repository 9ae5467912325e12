use std::collections::BTreeSet;

use e2urec_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::vocab::{NO_ID, YES_ID};
use crate::data::RenderedSample;
use crate::error::{Error, Result};
use crate::model::{
    bind, gradient_step, last_logits, shuffled_batches, train_original, Bound, ModelConfig, ModelParams,
    TrainConfig, TrainMode, TrainReport,
};

/// Shared settings of the gradient-based baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Largest per-sample loss a negated term may contribute.
    pub neg_clip: f64,
    /// Std of the start-point perturbation used by NegKL.
    pub negkl_jitter: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            learning_rate: 1e-3,
            neg_clip: 10.0,
            negkl_jitter: 1e-3,
            seed: 0,
        }
    }
}

/// Gold-standard reference: the original training recipe on `d_r` only.
pub fn retrain_from_scratch(
    config: &ModelConfig,
    d_r: &[RenderedSample],
    valid: &[RenderedSample],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    train_original(config, d_r, valid, cfg)
}

#[derive(Clone, Copy)]
enum Term {
    Pred,
    KlToOriginal,
}

/// Per-sample loss node: answer cross-entropy or `KL(original ‖ model)`.
fn sample_loss(
    tape: &mut Tape<'_>,
    b: &Bound<'_>,
    s: &RenderedSample,
    target: usize,
    teacher: Option<&[f64]>,
    term: Term,
) -> Result<Var> {
    let z = last_logits(tape, b, &s.token_ids)?;
    Ok(match term {
        Term::Pred => tape.cross_entropy(z, target)?,
        Term::KlToOriginal => tape.kl_div(teacher.expect("teacher cached"), z)?,
    })
}

struct Row<'d> {
    sample: &'d RenderedSample,
    target: usize,
    teacher: Option<&'d [f64]>,
    negate: bool,
}

/// Mean of the per-sample terms, with negated rows contributing
/// `−min(ℓ, clip)`.
fn signed_batch_var(
    t: &mut Tape<'_>,
    b: &Bound<'_>,
    rows: &[Row<'_>],
    term: Term,
    clip: f64,
) -> Result<Var> {
    let w = 1.0 / rows.len() as f64;
    let mut terms = Vec::with_capacity(rows.len());
    for r in rows {
        let l = sample_loss(t, b, r.sample, r.target, r.teacher, term)?;
        if r.negate {
            terms.push((t.clamp_max(l, clip), -w));
        } else {
            terms.push((l, w));
        }
    }
    Ok(t.combine(&terms)?)
}

/// Value of the NegGrad (`kl = false`) or NegKL (`kl = true`) objective of
/// `model` on one batch; samples of `forgotten_users` enter negated.
pub fn signed_batch_loss(
    model: &ModelParams,
    original: &ModelParams,
    batch: &[&RenderedSample],
    forgotten_users: &BTreeSet<String>,
    kl: bool,
    cfg: &FinetuneConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("loss batch"));
    }
    let term = if kl { Term::KlToOriginal } else { Term::Pred };
    let teachers: Vec<Option<Vec<f64>>> = batch
        .iter()
        .map(|s| match term {
            Term::Pred => Ok(None),
            Term::KlToOriginal => Ok(Some(e2urec_tensor::ops::softmax(
                &original.forward(&s.token_ids)?.answer_logits,
            )?)),
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Row<'_>> = batch
        .iter()
        .zip(&teachers)
        .map(|(s, tch)| Row {
            sample: s,
            target: s.answer_token_id,
            teacher: tch.as_deref(),
            negate: forgotten_users.contains(&s.user_id),
        })
        .collect();
    let mut tape = Tape::new();
    let b = bind(&mut tape, model, None);
    let v = signed_batch_var(&mut tape, &b, &rows, term, cfg.neg_clip)?;
    Ok(tape.value(v).item())
}

struct Stream<'d> {
    samples: Vec<&'d RenderedSample>,
    forgotten: Vec<bool>,
}

fn stream<'d>(d_f: &'d [RenderedSample], d_r: &'d [RenderedSample]) -> Result<Stream<'d>> {
    let users: BTreeSet<&str> = d_f.iter().map(|s| s.user_id.as_str()).collect();
    if d_r.iter().any(|s| users.contains(s.user_id.as_str())) {
        return Err(Error::BatchPurity("retained set shares users with the forgotten set".into()));
    }
    let mut samples: Vec<&RenderedSample> = d_r.iter().chain(d_f).collect();
    samples.sort_by(|a, b| (a.timestamp, &a.user_id, &a.item_id).cmp(&(b.timestamp, &b.user_id, &b.item_id)));
    let forgotten = samples.iter().map(|s| users.contains(s.user_id.as_str())).collect();
    Ok(Stream { samples, forgotten })
}

/// Full-parameter fine-tune over the merged train stream: retained samples
/// add their loss, forgotten samples subtract it (clipped) unless `relabel`
/// supplies a replacement target.
fn signed_finetune(
    original: &ModelParams,
    d_f: &[RenderedSample],
    d_r: &[RenderedSample],
    cfg: &FinetuneConfig,
    term: Term,
    relabel: bool,
    start: ModelParams,
) -> Result<ModelParams> {
    let st = stream(d_f, d_r)?;
    if st.samples.is_empty() {
        return Err(Error::EmptyDataset("fine-tuning stream"));
    }
    let teacher: Vec<Option<Vec<f64>>> = match term {
        Term::Pred => vec![None; st.samples.len()],
        Term::KlToOriginal => st
            .samples
            .iter()
            .map(|s| {
                let z = original.forward(&s.token_ids)?.answer_logits;
                Ok(Some(e2urec_tensor::ops::softmax(&z)?))
            })
            .collect::<Result<_>>()?,
    };
    let mut model = start;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut label_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1abe1);
    let mut opt = e2urec_tensor::Adam::new(e2urec_tensor::AdamConfig::with_lr(cfg.learning_rate));
    for _ in 0..cfg.epochs {
        let targets: Vec<usize> = st
            .samples
            .iter()
            .zip(&st.forgotten)
            .map(|(s, &f)| {
                if relabel && f {
                    if label_rng.random_bool(0.5) {
                        YES_ID
                    } else {
                        NO_ID
                    }
                } else {
                    s.answer_token_id
                }
            })
            .collect();
        for idx in shuffled_batches(st.samples.len(), cfg.batch_size, &mut rng) {
            let rows: Vec<Row<'_>> = idx
                .iter()
                .map(|&i| Row {
                    sample: st.samples[i],
                    target: targets[i],
                    teacher: teacher[i].as_deref(),
                    negate: st.forgotten[i] && !relabel,
                })
                .collect();
            gradient_step(&mut model, &mut opt, TrainMode::Full, |t, b| {
                signed_batch_var(t, b, &rows, term, cfg.neg_clip)
            })?;
        }
    }
    Ok(model)
}

/// Descends the prediction loss on `d_r` and ascends it on `d_f`.
pub fn neggrad_unlearn(
    original: &ModelParams,
    d_f: &[RenderedSample],
    d_r: &[RenderedSample],
    cfg: &FinetuneConfig,
) -> Result<ModelParams> {
    signed_finetune(original, d_f, d_r, cfg, Term::Pred, false, original.clone())
}

/// Keeps `KL(original ‖ model)` small on `d_r` and pushes it up on `d_f`.
///
/// The objective has a zero gradient at the original weights, so training
/// starts from a seeded perturbation of size `negkl_jitter`.
pub fn negkl_unlearn(
    original: &ModelParams,
    d_f: &[RenderedSample],
    d_r: &[RenderedSample],
    cfg: &FinetuneConfig,
) -> Result<ModelParams> {
    if cfg.epochs == 0 {
        return Ok(original.clone());
    }
    let mut start = original.clone();
    if cfg.negkl_jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a77);
        let noise = Normal::new(0.0, cfg.negkl_jitter)
            .map_err(|e| Error::Config(format!("negkl_jitter: {e}")))?;
        for t in start.base_mut() {
            jitter(t, &noise, &mut rng);
        }
    }
    signed_finetune(original, d_f, d_r, cfg, Term::KlToOriginal, false, start)
}

fn jitter(t: &mut Tensor, noise: &Normal<f64>, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v += noise.sample(rng);
    }
}

/// Fine-tunes on `d_r` plus `d_f` with labels redrawn uniformly per sample
/// and epoch.
pub fn badt_unlearn(
    original: &ModelParams,
    d_f: &[RenderedSample],
    d_r: &[RenderedSample],
    cfg: &FinetuneConfig,
) -> Result<ModelParams> {
    signed_finetune(original, d_f, d_r, cfg, Term::Pred, true, original.clone())
}
