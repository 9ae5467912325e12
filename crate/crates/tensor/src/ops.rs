//! Scalar-level numeric kernels shared by the tape and by evaluation code.

use crate::{Result, TensorError};

/// Probability floor applied to the second KL argument before taking logs.
pub const KL_FLOOR: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn check_finite(v: &[f64], op: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

/// Max-shifted softmax without input validation.
pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(TensorError::Index { index: 0, len: 0 });
    }
    check_finite(v, "softmax")?;
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    Ok(out)
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(TensorError::Index { index: 0, len: 0 });
    }
    check_finite(v, "log_softmax")?;
    let lse = log_sum_exp(v);
    Ok(v.iter().map(|x| x - lse).collect())
}

/// `Σ p_i ln(p_i / q_i)` with `0·ln(0/q) = 0` and `q` clamped at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(TensorError::Shape {
            op: "kl_divergence",
            left: vec![p.len()],
            right: vec![q.len()],
        });
    }
    for (name, d) in [("p", p), ("q", q)] {
        check_finite(d, "kl_divergence")?;
        let total: f64 = d.iter().sum();
        if (total - 1.0).abs() > 1e-6 || d.iter().any(|&x| x < 0.0) {
            return Err(TensorError::Distribution(format!(
                "{name} sums to {total}, expected 1"
            )));
        }
    }
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln()))
        .sum()
}

/// `−ln softmax(logits)[target]`.
pub fn cross_entropy_nll(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(TensorError::Index {
            index: target,
            len: logits.len(),
        });
    }
    check_finite(logits, "cross_entropy_nll")?;
    Ok(log_sum_exp(logits) - logits[target])
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Bernoulli Jensen-Shannon divergence between click probabilities, in nats.
pub fn bernoulli_jsd(p: f64, q: f64) -> f64 {
    jsd(&[p, 1.0 - p], &[q, 1.0 - q])
}

/// Jensen-Shannon divergence `½KL(P‖M) + ½KL(Q‖M)` with `M = ½(P+Q)`.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let mut kl_pm = 0.0;
    let mut kl_qm = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        kl_pm += term(a, m);
        kl_qm += term(b, m);
    }
    0.5 * kl_pm + 0.5 * kl_qm
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn softmax_uniform_and_analytic() {
        let s = softmax(&[0.7, 0.7, 0.7]).unwrap();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-15);
        assert!((s[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_inputs_match_shifted() {
        let big = softmax(&[1000.0, 1000.5]).unwrap();
        // naive softmax is safe on the shifted vector
        let e0 = 0f64.exp();
        let e1 = 0.5f64.exp();
        let naive = [e0 / (e0 + e1), e1 / (e0 + e1)];
        assert!(big.iter().all(|v| v.is_finite()));
        for (a, b) in big.iter().zip(naive) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert_eq!(softmax(&[1.0, f64::NAN]), Err(TensorError::NonFinite("softmax")));
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-15);
        // direct summation oracle
        let want = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        let got = kl_divergence(&[0.75, 0.25], &[0.5, 0.5]).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn kl_errors() {
        assert!(matches!(
            kl_divergence(&[1.0], &[0.5, 0.5]),
            Err(TensorError::Shape { .. })
        ));
        assert!(matches!(
            kl_divergence(&[0.6, 0.6], &[0.5, 0.5]),
            Err(TensorError::Distribution(_))
        ));
        // zero q where p > 0 is clamped, not infinite
        let v = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(v.is_finite() && v > 10.0);
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy_nll(&[0.3, 0.3], 0).unwrap() - LN_2).abs() < 1e-15);
        let v = cross_entropy_nll(&[0.0, 3f64.ln()], 1).unwrap();
        assert!((v + 0.75f64.ln()).abs() < 1e-15);
        assert!((v - 0.2877).abs() < 1e-4);
        assert_eq!(
            cross_entropy_nll(&[0.0, 1.0], 2),
            Err(TensorError::Index { index: 2, len: 2 })
        );
    }

    #[test]
    fn jsd_extremes() {
        assert!((bernoulli_jsd(1.0, 0.0) - LN_2).abs() < 1e-9);
        assert_eq!(bernoulli_jsd(0.3, 0.3), 0.0);
        let m = [0.625, 0.375];
        let oracle = 0.5 * kl_unchecked(&[0.75, 0.25], &m) + 0.5 * kl_unchecked(&[0.5, 0.5], &m);
        assert!((bernoulli_jsd(0.75, 0.5) - oracle).abs() < 1e-15);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.1, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
