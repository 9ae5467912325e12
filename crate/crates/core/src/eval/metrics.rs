use e2urec_tensor::ops::{bernoulli_jsd, jsd};
use e2urec_tensor::ops::softmax;

use crate::data::RenderedSample;
use crate::error::{Error, Result};
use crate::model::{ClickScorer, ModelParams};

/// Probability clamp applied before taking logs.
pub const LOGLOSS_EPS: f64 = 1e-7;

fn check_pair(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::EmptyDataset("metric input"));
    }
    Ok(())
}

/// Area under the ROC curve via the Mann–Whitney rank statistic with average
/// ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are doubled so tied groups get integer (2·average) ranks.
    let mut pos_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                pos_rank_sum2 += rank2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    // Twice the Mann–Whitney U, an exact integer.
    let u2 = pos_rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Fraction of samples where `score ≥ threshold` agrees with the label.
pub fn acc(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_pair(scores, labels)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, y)| (**s >= threshold) == (**y == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Mean binary cross-entropy with scores clamped to `[1e-7, 1 − 1e-7]`.
pub fn logloss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores, labels)?;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = s.clamp(LOGLOSS_EPS, 1.0 - LOGLOSS_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Euclidean distance between `[p, 1−p]` and `[q, 1−q]`.
pub fn bernoulli_l2(p: f64, q: f64) -> f64 {
    let d = p - q;
    (d * d + d * d).sqrt()
}

/// Mean Bernoulli JSD and mean L2 distance between paired click probabilities.
pub fn paired_divergence(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Config(format!("{} vs {} predictions", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::EmptyForgottenSet);
    }
    let n = a.len() as f64;
    let j = a.iter().zip(b).map(|(&p, &q)| bernoulli_jsd(p, q)).sum::<f64>() / n;
    let l = a.iter().zip(b).map(|(&p, &q)| bernoulli_l2(p, q)).sum::<f64>() / n;
    Ok((j, l))
}

/// Mean JSD between two scorers' click distributions over `d_f`.
pub fn jsd_on_forgotten(
    a: &(impl ClickScorer + ?Sized),
    b: &(impl ClickScorer + ?Sized),
    d_f: &[RenderedSample],
) -> Result<f64> {
    Ok(paired_divergence(&a.scores(d_f)?, &b.scores(d_f)?)?.0)
}

/// Mean L2 distance between two scorers' click distributions over `d_f`.
pub fn l2_on_forgotten(
    a: &(impl ClickScorer + ?Sized),
    b: &(impl ClickScorer + ?Sized),
    d_f: &[RenderedSample],
) -> Result<f64> {
    Ok(paired_divergence(&a.scores(d_f)?, &b.scores(d_f)?)?.1)
}

/// Full-vocabulary variant: JSD and L2 between next-token distributions at the
/// answer position.
pub fn full_vocab_divergence(
    a: &ModelParams,
    b: &ModelParams,
    d_f: &[RenderedSample],
) -> Result<(f64, f64)> {
    if d_f.is_empty() {
        return Err(Error::EmptyForgottenSet);
    }
    let (mut j, mut l) = (0.0, 0.0);
    for s in d_f {
        let p = softmax(&a.forward(&s.token_ids)?.answer_logits)?;
        let q = softmax(&b.forward(&s.token_ids)?.answer_logits)?;
        j += jsd(&p, &q);
        l += p.iter().zip(&q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    }
    let n = d_f.len() as f64;
    Ok((j / n, l / n))
}
