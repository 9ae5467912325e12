use e2urec_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::config::LoraTarget;
use super::params::{slot, ModelParams, TrainMode};
use crate::data::vocab::{NO_ID, YES_ID};
use crate::data::RenderedSample;
use crate::error::{Error, Result};

/// Model parameters registered as leaves of one tape.
pub struct Bound<'p> {
    pub params: &'p ModelParams,
    pub base: Vec<Var>,
    pub lora: Vec<Var>,
    pub mode: Option<TrainMode>,
}

/// Registers every parameter on `tape`. `mode = None` binds for inference.
pub fn bind<'p>(tape: &mut Tape<'p>, params: &'p ModelParams, mode: Option<TrainMode>) -> Bound<'p> {
    let base_rg = mode == Some(TrainMode::Full);
    let lora_rg = mode == Some(TrainMode::Lora);
    let base = params.base.iter().map(|t| tape.leaf_ref(t, base_rg)).collect();
    let lora = params.lora.iter().map(|t| tape.leaf_ref(t, lora_rg)).collect();
    Bound {
        params,
        base,
        lora,
        mode,
    }
}

impl Bound<'_> {
    fn layer(&self, l: usize, k: usize) -> Var {
        self.base[slot::LAYERS_START + slot::PER_LAYER * l + k]
    }

    fn tail(&self, from_end: usize) -> Var {
        self.base[self.base.len() - from_end]
    }

    /// Collects gradients for the trained group, zero-filling unreached leaves.
    pub fn trained_grads(&self, grads: &mut e2urec_tensor::Gradients) -> Vec<Option<Tensor>> {
        let (vars, vals) = match self.mode {
            Some(TrainMode::Full) => (&self.base, &self.params.base),
            Some(TrainMode::Lora) => (&self.lora, &self.params.lora),
            None => return Vec::new(),
        };
        vars.iter()
            .zip(vals)
            .map(|(&v, t)| Some(grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()))))
            .collect()
    }
}

fn check_len(params: &ModelParams, ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::SequenceLength { len: 0, max: params.config.max_seq_len });
    }
    if ids.len() > params.config.max_seq_len {
        return Err(Error::SequenceLength {
            len: ids.len(),
            max: params.config.max_seq_len,
        });
    }
    Ok(())
}

/// `x·W + b`, plus `(scale/r)·x·Aᵀ·Bᵀ` when an adapter sits on this projection.
fn projection(
    tape: &mut Tape<'_>,
    b: &Bound<'_>,
    x: Var,
    layer: usize,
    w: usize,
    target: LoraTarget,
) -> Result<Var> {
    let cfg = &b.params.config;
    let mut y = tape.matmul(x, b.layer(layer, w))?;
    y = tape.add_row(y, b.layer(layer, w + 1))?;
    if let Some(i) = b.params.lora_slot(layer, target) {
        let xa = tape.matmul_nt(x, b.lora[i])?;
        let delta = tape.matmul_nt(xa, b.lora[i + 1])?;
        let delta = tape.scale(delta, cfg.lora_scale / cfg.lora_rank as f64);
        y = tape.add(y, delta)?;
    }
    Ok(y)
}

/// One pre-norm block. With `last_only`, queries, the residual and the FFN are
/// computed for the final row alone.
fn block(tape: &mut Tape<'_>, b: &Bound<'_>, x: Var, l: usize, last_only: bool) -> Result<Var> {
    let cfg = &b.params.config;
    let eps = cfg.layer_norm_eps;
    let t = tape.value(x).rows();
    let h = tape.layer_norm(x, b.layer(l, slot::LN1_G), b.layer(l, slot::LN1_B), eps)?;
    let (hq, q_start) = if last_only {
        (tape.slice_rows(h, t - 1, 1)?, t - 1)
    } else {
        (h, 0)
    };
    let q = projection(tape, b, hq, l, slot::WQ, LoraTarget::Query)?;
    let k = projection(tape, b, h, l, slot::WK, LoraTarget::Key)?;
    let v = projection(tape, b, h, l, slot::WV, LoraTarget::Value)?;
    let hd = cfg.head_dim();
    let inv = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for i in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, i * hd, hd)?;
        let kh = tape.slice_cols(k, i * hd, hd)?;
        let vh = tape.slice_cols(v, i * hd, hd)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, inv);
        let a = tape.causal_softmax(s, q_start);
        heads.push(tape.matmul(a, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let o = projection(tape, b, cat, l, slot::WO, LoraTarget::Output)?;
    let resid = if last_only { tape.slice_rows(x, t - 1, 1)? } else { x };
    let x = tape.add(resid, o)?;

    let h = tape.layer_norm(x, b.layer(l, slot::LN2_G), b.layer(l, slot::LN2_B), eps)?;
    let f = tape.matmul(h, b.layer(l, slot::W1))?;
    let f = tape.add_row(f, b.layer(l, slot::B1))?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, b.layer(l, slot::W2))?;
    let f = tape.add_row(f, b.layer(l, slot::B2))?;
    Ok(tape.add(x, f)?)
}

fn run(tape: &mut Tape<'_>, b: &Bound<'_>, ids: &[usize], last_only: bool) -> Result<Var> {
    let cfg = &b.params.config;
    check_len(b.params, ids)?;
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Vocabulary(format!(
            "token id {bad} outside model vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = tape.embedding(b.base[slot::TOK_EMB], ids)?;
    let pos = tape.embedding(b.base[slot::POS_EMB], &positions)?;
    let mut x = tape.add(tok, pos)?;
    for l in 0..cfg.n_layers {
        let last = last_only && l + 1 == cfg.n_layers;
        x = block(tape, b, x, l, last)?;
    }
    let x = tape.layer_norm(x, b.tail(4), b.tail(3), cfg.layer_norm_eps)?;
    let y = tape.matmul(x, b.tail(2))?;
    Ok(tape.add_row(y, b.tail(1))?)
}

/// Next-token logits at the final position, shape `1×V`.
pub fn last_logits(tape: &mut Tape<'_>, b: &Bound<'_>, ids: &[usize]) -> Result<Var> {
    run(tape, b, ids, true)
}

/// Next-token logits at every position, shape `T×V`.
pub fn all_logits(tape: &mut Tape<'_>, b: &Bound<'_>, ids: &[usize]) -> Result<Var> {
    run(tape, b, ids, false)
}

/// `sigmoid(z_yes − z_no)`, i.e. softmax restricted to the two answer tokens.
pub fn p_click_from_logits(logits: &[f64]) -> f64 {
    let d = logits[YES_ID] - logits[NO_ID];
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Output of one inference pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    /// Full-vocabulary logits at the position predicting the answer.
    pub answer_logits: Vec<f64>,
    pub p_click: f64,
}

/// Which distribution the distillation terms compare.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlSpace {
    #[default]
    FullVocab,
    AnswerPair,
}

impl KlSpace {
    /// Token ids the distribution ranges over, or `None` for the whole vocabulary.
    pub fn columns(self) -> Option<&'static [usize]> {
        match self {
            KlSpace::FullVocab => None,
            KlSpace::AnswerPair => Some(&[YES_ID, NO_ID]),
        }
    }

    /// Restricts `logits` to this space.
    pub fn project(self, logits: &[f64]) -> Vec<f64> {
        match self.columns() {
            None => logits.to_vec(),
            Some(cols) => cols.iter().map(|&c| logits[c]).collect(),
        }
    }

    /// Tape counterpart of [`KlSpace::project`].
    pub fn project_var(self, tape: &mut Tape<'_>, logits: Var) -> Result<Var> {
        match self.columns() {
            None => Ok(logits),
            Some(cols) => Ok(tape.select(logits, cols)?),
        }
    }
}

impl ModelParams {
    pub fn forward(&self, ids: &[usize]) -> Result<LogitRecord> {
        let mut tape = Tape::new();
        let b = bind(&mut tape, self, None);
        let z = last_logits(&mut tape, &b, ids)?;
        let answer_logits = tape.value(z).data().to_vec();
        Ok(LogitRecord {
            p_click: p_click_from_logits(&answer_logits),
            answer_logits,
        })
    }

    /// Logits at every position, row-major `T×V`.
    pub fn forward_all(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = bind(&mut tape, self, None);
        let z = all_logits(&mut tape, &b, ids)?;
        Ok(tape.value(z).clone())
    }

    /// Summed next-token NLL of a multi-token `answer` following `prompt`.
    pub fn sequence_nll(&self, prompt: &[usize], answer: &[usize]) -> Result<f64> {
        if answer.is_empty() {
            return Ok(0.0);
        }
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(&answer[..answer.len() - 1]);
        let z = self.forward_all(&ids)?;
        let mut total = 0.0;
        for (j, &a) in answer.iter().enumerate() {
            let row = z.row(prompt.len() - 1 + j);
            total += e2urec_tensor::ops::cross_entropy_nll(row, a)?;
        }
        Ok(total)
    }

    /// Mean next-token cross-entropy of the answer token.
    pub fn prediction_loss(&self, samples: &[RenderedSample]) -> Result<f64> {
        let mut rows = Vec::with_capacity(samples.len());
        for s in samples {
            rows.push((self.forward(&s.token_ids)?.answer_logits, s.answer_token_id));
        }
        mean_nll(&rows)
    }
}

/// Mean cross-entropy of `(logits, target)` rows.
pub fn mean_nll(rows: &[(Vec<f64>, usize)]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset("loss evaluation set"));
    }
    let mut total = 0.0;
    for (z, t) in rows {
        total += e2urec_tensor::ops::cross_entropy_nll(z, *t)?;
    }
    Ok(total / rows.len() as f64)
}

/// Mean answer-token cross-entropy of `batch` on a bound tape.
pub fn prediction_loss_var(
    tape: &mut Tape<'_>,
    b: &Bound<'_>,
    batch: &[&RenderedSample],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("training batch"));
    }
    let w = 1.0 / batch.len() as f64;
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        let z = last_logits(tape, b, &s.token_ids)?;
        terms.push((tape.cross_entropy(z, s.answer_token_id)?, w));
    }
    Ok(tape.combine(&terms)?)
}

/// Anything that assigns a click probability to a rendered sample.
pub trait ClickScorer {
    fn p_click(&self, sample: &RenderedSample) -> Result<f64>;

    fn scores(&self, samples: &[RenderedSample]) -> Result<Vec<f64>> {
        samples.iter().map(|s| self.p_click(s)).collect()
    }
}

impl ClickScorer for ModelParams {
    fn p_click(&self, sample: &RenderedSample) -> Result<f64> {
        Ok(self.forward(&sample.token_ids)?.p_click)
    }
}
