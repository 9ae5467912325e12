//! Teacher-student unlearning with a forgetting teacher built from an
//! augmented model and the original model as the remembering teacher.

use std::collections::BTreeSet;
use std::path::Path;

use e2urec_tensor::ops::{bernoulli_jsd, softmax};
use e2urec_tensor::{Tape, TensorError, Var};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RenderedSample;
use crate::error::{Error, Result};
use crate::eval::logloss;
use crate::model::{
    bind, gradient_step, last_logits, p_click_from_logits, prediction_loss_var, shuffled_batches,
    Bound, ClickScorer, KlSpace, ModelParams, ParamCount, TrainMode,
};

/// `v − α·ReLU(v_aug − v)`, element-wise.
pub fn forgetting_teacher_logits(v: &[f64], v_aug: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if v.len() != v_aug.len() {
        return Err(TensorError::Shape {
            op: "forgetting_teacher_logits",
            left: vec![v.len()],
            right: vec![v_aug.len()],
        }
        .into());
    }
    check_alpha(alpha)?;
    Ok(v.iter()
        .zip(v_aug)
        .map(|(&a, &b)| a - alpha * (b - a).max(0.0))
        .collect())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must be positive, got {alpha}")))
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")))
    }
}

/// `β·l_fgt + (1−β)·l_rem`.
pub fn combined_loss(l_fgt: f64, l_rem: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok(beta * l_fgt + (1.0 - beta) * l_rem)
}

/// Frozen teachers for one unlearning request.
#[derive(Clone, Debug)]
pub struct TeacherBundle {
    pub original: ModelParams,
    pub augmented: ModelParams,
    pub alpha: f64,
}

impl TeacherBundle {
    pub fn new(original: ModelParams, augmented: ModelParams, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let shapes = |p: &ModelParams| p.base().iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
        if original.config() != augmented.config() || shapes(&original) != shapes(&augmented) {
            return Err(Error::Config("teachers must share one model config".into()));
        }
        Ok(Self {
            original,
            augmented,
            alpha,
        })
    }

    /// Forgetting-teacher logits `v_f` for one sample.
    pub fn forget_logits(&self, sample: &RenderedSample) -> Result<Vec<f64>> {
        let v = self.original.forward(&sample.token_ids)?.answer_logits;
        let v_aug = self.augmented.forward(&sample.token_ids)?.answer_logits;
        forgetting_teacher_logits(&v, &v_aug, self.alpha)
    }

    /// `softmax(v_f)` restricted to `space`.
    pub fn forget_target(&self, sample: &RenderedSample, space: KlSpace) -> Result<Vec<f64>> {
        Ok(softmax(&space.project(&self.forget_logits(sample)?))?)
    }

    /// The original model's distribution restricted to `space`.
    pub fn remember_target(&self, sample: &RenderedSample, space: KlSpace) -> Result<Vec<f64>> {
        let v = self.original.forward(&sample.token_ids)?.answer_logits;
        Ok(softmax(&space.project(&v))?)
    }
}

/// Fails unless every sample's user is (or, with `forgotten = false`, is not)
/// in the forgotten set.
pub fn check_purity(
    batch: &[&RenderedSample],
    forgotten_users: &BTreeSet<String>,
    forgotten: bool,
) -> Result<()> {
    if let Some(s) = batch
        .iter()
        .find(|s| forgotten_users.contains(&s.user_id) != forgotten)
    {
        let side = if forgotten { "forgetting" } else { "remembering" };
        return Err(Error::BatchPurity(format!(
            "{side} batch holds a sample of user `{}`",
            s.user_id
        )));
    }
    Ok(())
}

fn mean_kl(
    tape: &mut Tape<'_>,
    b: &Bound<'_>,
    batch: &[&RenderedSample],
    targets: &[&[f64]],
    space: KlSpace,
) -> Result<Var> {
    if batch.is_empty() || batch.len() != targets.len() {
        return Err(Error::EmptyDataset("distillation batch"));
    }
    let w = 1.0 / batch.len() as f64;
    let mut terms = Vec::with_capacity(batch.len());
    for (s, t) in batch.iter().zip(targets) {
        let z = last_logits(tape, b, &s.token_ids)?;
        let z = space.project_var(tape, z)?;
        terms.push((tape.kl_div(t, z)?, w));
    }
    Ok(tape.combine(&terms)?)
}

/// Mean `KL(teacher ‖ student)` over a forgotten-set batch.
pub fn forgetting_loss_var(
    tape: &mut Tape<'_>,
    b: &Bound<'_>,
    batch: &[&RenderedSample],
    targets: &[&[f64]],
    space: KlSpace,
) -> Result<Var> {
    mean_kl(tape, b, batch, targets, space)
}

/// Remembering loss on a tape: `(L_pred, mean KL, L_pred + mean KL)`. Both
/// terms share one forward pass per sample.
pub fn remembering_loss_var(
    tape: &mut Tape<'_>,
    b: &Bound<'_>,
    batch: &[&RenderedSample],
    targets: &[&[f64]],
    space: KlSpace,
) -> Result<(Var, Var, Var)> {
    if batch.is_empty() || batch.len() != targets.len() {
        return Err(Error::EmptyDataset("distillation batch"));
    }
    let w = 1.0 / batch.len() as f64;
    let mut ce = Vec::with_capacity(batch.len());
    let mut kl = Vec::with_capacity(batch.len());
    for (s, t) in batch.iter().zip(targets) {
        let z = last_logits(tape, b, &s.token_ids)?;
        ce.push((tape.cross_entropy(z, s.answer_token_id)?, w));
        let zs = space.project_var(tape, z)?;
        kl.push((tape.kl_div(t, zs)?, w));
    }
    let pred = tape.combine(&ce)?;
    let kl = tape.combine(&kl)?;
    let total = tape.combine(&[(pred, 1.0), (kl, 1.0)])?;
    Ok((pred, kl, total))
}

fn eval_loss(
    student: &ModelParams,
    f: impl for<'p> FnOnce(&mut Tape<'p>, &Bound<'p>) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let b = bind(&mut tape, student, None);
    let v = f(&mut tape, &b)?;
    Ok(tape.value(v).item())
}

/// Forgetting loss of `student` on a batch drawn from the forgotten users.
pub fn forgetting_loss(
    student: &ModelParams,
    teachers: &TeacherBundle,
    batch: &[&RenderedSample],
    forgotten_users: &BTreeSet<String>,
    space: KlSpace,
) -> Result<f64> {
    check_purity(batch, forgotten_users, true)?;
    let targets = batch
        .iter()
        .map(|s| teachers.forget_target(s, space))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    eval_loss(student, |t, b| forgetting_loss_var(t, b, batch, &refs, space))
}

/// Remembering loss of `student` on a batch drawn from retained users.
pub fn remembering_loss(
    student: &ModelParams,
    teachers: &TeacherBundle,
    batch: &[&RenderedSample],
    forgotten_users: &BTreeSet<String>,
    space: KlSpace,
) -> Result<f64> {
    check_purity(batch, forgotten_users, false)?;
    let targets = batch
        .iter()
        .map(|s| teachers.remember_target(s, space))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    eval_loss(student, |t, b| Ok(remembering_loss_var(t, b, batch, &refs, space)?.2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub forget_batch_size: usize,
    pub retain_batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub augment_epochs: usize,
    pub augment_learning_rate: f64,
    /// `Full` fine-tunes every base weight of the augmented model; `Lora`
    /// trains adapters on a copy instead.
    pub augment_mode: AugmentMode,
    pub kl_space: KlSpace,
    /// Share of the forgotten set held out for checkpoint selection.
    pub holdout_fraction: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    #[default]
    Full,
    Lora,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 0.6,
            epochs: 5,
            forget_batch_size: 16,
            retain_batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            augment_epochs: 3,
            augment_learning_rate: 1e-4,
            augment_mode: AugmentMode::Full,
            kl_space: KlSpace::FullVocab,
            holdout_fraction: 0.1,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        check_beta(self.beta)?;
        if self.forget_batch_size == 0 || self.retain_batch_size == 0 {
            return Err(Error::Config("unlearning batch sizes must be positive".into()));
        }
        for lr in [self.learning_rate, self.augment_learning_rate] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("learning rate {lr} is not positive")));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Weights on `(L_FGT, L_REM)`.
    pub fn weights(&self) -> (f64, f64) {
        (self.beta, 1.0 - self.beta)
    }
}

/// Copy of `original` further trained on `d_f` with the prediction loss.
pub fn finetune_augmented(
    original: &ModelParams,
    d_f: &[RenderedSample],
    cfg: &UnlearnConfig,
) -> Result<ModelParams> {
    if d_f.is_empty() {
        return Err(Error::EmptyForgottenSet);
    }
    let mut aug = original.clone();
    let mode = match cfg.augment_mode {
        AugmentMode::Full => TrainMode::Full,
        AugmentMode::Lora => {
            aug.attach_lora(cfg.seed ^ 0xa5a5);
            TrainMode::Lora
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = e2urec_tensor::Adam::new(e2urec_tensor::AdamConfig::with_lr(cfg.augment_learning_rate));
    for _ in 0..cfg.augment_epochs {
        for idx in shuffled_batches(d_f.len(), cfg.forget_batch_size, &mut rng) {
            let batch: Vec<&RenderedSample> = idx.iter().map(|&i| &d_f[i]).collect();
            gradient_step(&mut aug, &mut opt, mode, |t, b| prediction_loss_var(t, b, &batch))?;
        }
    }
    Ok(aug)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_fgt: f64,
    pub l_rem: f64,
    pub combined: f64,
    pub phi_hash: String,
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    pub model: ModelParams,
    pub log: Vec<EpochLog>,
    /// Selection score per epoch (held-out JSD proxy plus validation LogLoss).
    pub selection: Vec<f64>,
    pub best_epoch: usize,
    pub steps: u64,
    pub trainable: ParamCount,
}

impl UnlearnOutcome {
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.log).expect("log serialises");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

fn user_set(samples: &[RenderedSample]) -> BTreeSet<String> {
    samples.iter().map(|s| s.user_id.clone()).collect()
}

fn selection_score(
    student: &ModelParams,
    holdout: &[&RenderedSample],
    teacher_p: &[f64],
    valid: &[RenderedSample],
) -> Result<f64> {
    let mut score = 0.0;
    if !holdout.is_empty() {
        let mut j = 0.0;
        for (s, &q) in holdout.iter().zip(teacher_p) {
            j += bernoulli_jsd(student.p_click(s)?, q);
        }
        score += j / holdout.len() as f64;
    }
    if !valid.is_empty() {
        let labels: Vec<u8> = valid.iter().map(|s| s.label).collect();
        score += logloss(&student.scores(valid)?, &labels)?;
    }
    Ok(score)
}

/// Runs the full unlearning procedure and returns the adapted model.
///
/// Each step pairs one forgotten-set batch with one retained batch (the
/// retained order cycles) and updates only the adapters.
pub fn run_e2urec(
    original: &ModelParams,
    d_f: &[RenderedSample],
    d_r: &[RenderedSample],
    valid: &[RenderedSample],
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    if d_f.is_empty() {
        return Err(Error::EmptyForgottenSet);
    }
    if d_r.is_empty() {
        return Err(Error::EmptyDataset("retained set"));
    }
    let forgotten_users = user_set(d_f);
    let all_r: Vec<&RenderedSample> = d_r.iter().collect();
    check_purity(&all_r, &forgotten_users, false)?;
    let space = cfg.kl_space;
    let (w_f, w_r) = cfg.weights();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..d_f.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((cfg.holdout_fraction * d_f.len() as f64).round() as usize).min(d_f.len() - 1);
    let holdout: Vec<&RenderedSample> = order[..n_hold].iter().map(|&i| &d_f[i]).collect();
    let mut train_idx = order[n_hold..].to_vec();
    train_idx.sort_unstable();
    let f_train: Vec<RenderedSample> = train_idx.iter().map(|&i| d_f[i].clone()).collect();

    let phi_hash = original.base_hash();
    let augmented = finetune_augmented(original, &f_train, cfg)?;
    let teachers = TeacherBundle::new(original.clone(), augmented, cfg.alpha)?;
    let f_targets = f_train
        .iter()
        .map(|s| teachers.forget_target(s, space))
        .collect::<Result<Vec<_>>>()?;
    let r_targets = d_r
        .iter()
        .map(|s| teachers.remember_target(s, space))
        .collect::<Result<Vec<_>>>()?;
    let hold_p = holdout
        .iter()
        .map(|s| Ok(p_click_from_logits(&teachers.forget_logits(s)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut student = original.clone();
    student.detach_lora();
    student.attach_lora(cfg.seed);
    let expected_trainable = student.config().lora_param_count();
    let trainable = student.count_params(TrainMode::Lora);

    let mut opt = e2urec_tensor::Adam::new(e2urec_tensor::AdamConfig::with_lr(cfg.learning_rate));
    let mut r_order: Vec<usize> = Vec::new();
    let mut r_pos = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut selection = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        let (mut sf, mut sr, mut sc, mut n) = (0.0, 0.0, 0.0, 0usize);
        for idx in shuffled_batches(f_train.len(), cfg.forget_batch_size, &mut rng) {
            let fb: Vec<&RenderedSample> = idx.iter().map(|&i| &f_train[i]).collect();
            let ft: Vec<&[f64]> = idx.iter().map(|&i| f_targets[i].as_slice()).collect();
            let mut ridx = Vec::with_capacity(cfg.retain_batch_size);
            while ridx.len() < cfg.retain_batch_size.min(d_r.len()) {
                if r_pos == r_order.len() {
                    r_order = (0..d_r.len()).collect();
                    r_order.shuffle(&mut rng);
                    r_pos = 0;
                }
                ridx.push(r_order[r_pos]);
                r_pos += 1;
            }
            let rb: Vec<&RenderedSample> = ridx.iter().map(|&i| &d_r[i]).collect();
            let rt: Vec<&[f64]> = ridx.iter().map(|&i| r_targets[i].as_slice()).collect();
            check_purity(&fb, &forgotten_users, true)?;
            check_purity(&rb, &forgotten_users, false)?;
            let audit = student.count_params(TrainMode::Lora).trainable;
            if audit != expected_trainable {
                return Err(Error::Training {
                    step: opt.steps(),
                    msg: format!("{audit} trainable parameters, expected {expected_trainable}"),
                });
            }
            let (mut lf, mut lr) = (0.0, 0.0);
            let c = gradient_step(&mut student, &mut opt, TrainMode::Lora, |t, b| {
                let f = forgetting_loss_var(t, b, &fb, &ft, space)?;
                let (_, _, r) = remembering_loss_var(t, b, &rb, &rt, space)?;
                lf = t.value(f).item();
                lr = t.value(r).item();
                Ok(t.combine(&[(f, w_f), (r, w_r)])?)
            })?;
            sf += lf;
            sr += lr;
            sc += c;
            n += 1;
        }
        let hash = student.base_hash();
        let nf = n.max(1) as f64;
        log.push(EpochLog {
            epoch,
            l_fgt: sf / nf,
            l_rem: sr / nf,
            combined: sc / nf,
            phi_hash: hash,
        });
        let score = selection_score(&student, &holdout, &hold_p, valid)?;
        debug!("unlearn epoch {epoch}: fgt {:.4} rem {:.4} score {score:.4}", sf / nf, sr / nf);
        selection.push(score);
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, epoch, student.clone()));
        }
    }

    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, student),
    };
    if model.base_hash() != phi_hash {
        return Err(Error::Training {
            step: opt.steps(),
            msg: "frozen base weights changed".into(),
        });
    }
    info!("unlearning finished: {} steps, best epoch {best_epoch}", opt.steps());
    Ok(UnlearnOutcome {
        model,
        log,
        selection,
        best_epoch,
        steps: opt.steps(),
        trainable,
    })
}
