use e2urec_core::eval::*;
use e2urec_core::model::ParamCount;
use e2urec_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

#[test]
fn auc_examples() {
    assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
    assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
    assert_eq!(auc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
    assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
}

#[test]
fn auc_matches_brute_force_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        // Coarse grid to force ties.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 1;
        labels[1] = 0;
        assert_eq!(auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
    }
}

#[test]
fn acc_examples() {
    let s = [0.7, 0.2, 0.5];
    let y = [1, 0, 0];
    let oracle = [true, true, false];
    let want = oracle.iter().filter(|&&c| c).count() as f64 / 3.0;
    assert_eq!(acc(&s, &y, 0.5).unwrap(), want);
    assert_eq!(acc(&s, &[1, 0, 1], 0.5).unwrap(), 1.0);
    let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
    assert!((acc(&s, &flipped, 0.5).unwrap() - (1.0 - want)).abs() < 1e-15);
}

#[test]
fn logloss_examples() {
    assert!((logloss(&[0.5; 4], &[1, 0, 1, 0]).unwrap() - 2f64.ln()).abs() < 1e-15);
    let perfect = logloss(&[1.0, 0.0], &[1, 0]).unwrap();
    assert!(perfect > 0.0 && perfect < 1e-6);
    let want = -(0.8f64.ln() + (1.0f64 - 0.3).ln()) / 2.0;
    assert!((logloss(&[0.8, 0.3], &[1, 0]).unwrap() - want).abs() < 1e-15);
}

#[test]
fn divergence_examples() {
    let (j, l) = paired_divergence(&[0.3, 0.9], &[0.3, 0.9]).unwrap();
    assert_eq!((j, l), (0.0, 0.0));
    let (j, l) = paired_divergence(&[1.0], &[0.0]).unwrap();
    assert!((j - 2f64.ln()).abs() < 1e-12);
    assert!((l - 2f64.sqrt()).abs() < 1e-12);

    let kl = |a: f64, b: f64| a * (a / b).ln();
    let (p, q) = (0.75, 0.5);
    let (mp, mq) = ((p + q) / 2.0, (1.0 - p + 1.0 - q) / 2.0);
    let want = 0.5 * (kl(p, mp) + kl(1.0 - p, mq)) + 0.5 * (kl(q, mp) + kl(1.0 - q, mq));
    let (j, _) = paired_divergence(&[p, p], &[q, q]).unwrap();
    assert!((j - want).abs() < 1e-12);
    assert!(matches!(paired_divergence(&[], &[]), Err(Error::EmptyForgottenSet)));
}

proptest! {
    #[test]
    fn divergence_properties(pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..40)) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let (j1, l1) = paired_divergence(&a, &b).unwrap();
        let (j2, l2) = paired_divergence(&b, &a).unwrap();
        prop_assert_eq!(j1, j2);
        prop_assert_eq!(l1, l2);
        prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&j1));
        let want = a.iter().zip(&b).map(|(p, q)| 2f64.sqrt() * (p - q).abs()).sum::<f64>() / a.len() as f64;
        prop_assert!((l1 - want).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_pure(scores in prop::collection::vec(0.0f64..1.0, 2..30)) {
        let labels: Vec<u8> = (0..scores.len()).map(|i| (i % 2) as u8).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&scores, &labels).unwrap());
        prop_assert_eq!(logloss(&scores, &labels).unwrap(), logloss(&scores, &labels).unwrap());
    }
}

fn report(method: &str) -> MetricsReport {
    MetricsReport {
        method: method.into(),
        seed: 3,
        config_digest: "abc".into(),
        auc: 0.71,
        acc: 0.66,
        logloss: 0.61,
        jsd: Some(0.0123),
        l2norm: Some(0.04),
        wall_time_seconds: 1.5,
        trainable_params: 2048,
        total_params: 110_000,
        log_base: LOG_BASE.into(),
    }
}

#[test]
fn report_round_trip_and_validation() {
    let r = report("E2URec");
    r.validate().unwrap();
    assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
    let bad = MetricsReport { jsd: Some(0.8), ..r.clone() };
    assert!(bad.validate().is_err());
    let bad = MetricsReport { auc: 1.2, ..r };
    assert!(bad.validate().is_err());
}

#[test]
fn table_has_both_groups_and_percent_columns() {
    let rows = vec![
        MetricsReport { jsd: None, l2norm: None, ..report("Retrain") },
        report("E2URec"),
    ];
    let t = render_table(&rows);
    assert!(t.contains("Effectiveness") && t.contains("Efficiency"));
    assert!(t.contains("1.230"));
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[3].starts_with("Retrain") && lines[3].contains(" - "));
    let w = lines[1].len();
    assert!(lines[3..].iter().all(|l| l.len() == w));
    assert!(lines[3].contains(" 1.000 ") && lines[4].contains(" 1.000 "));
}

#[test]
fn time_ratio_is_relative_to_retrain() {
    let rows = vec![
        MetricsReport { wall_time_seconds: 4.0, jsd: None, l2norm: None, ..report("Retrain") },
        MetricsReport { wall_time_seconds: 1.0, ..report("E2URec") },
    ];
    let t = render_table(&rows);
    assert!(t.lines().nth(4).unwrap().contains(" 0.250 "));
    let alone = render_table(&rows[1..]);
    assert!(alone.lines().nth(3).unwrap().contains(" - | "));
}

#[test]
fn timing_of_noop_and_repeatability() {
    let (_, c) = time_and_count(|| Ok(((), ParamCount { total: 0, trainable: 0 }))).unwrap();
    assert_eq!(c.trainable_params, 0);
    assert!(c.wall_time_seconds < 0.01);
    let runs: Vec<MethodCost> = (0..3)
        .map(|_| {
            time_and_count(|| {
                let s: f64 = (0..100_000).map(|i| (i as f64).sqrt()).sum();
                Ok((s, ParamCount { total: 10, trainable: 4 }))
            })
            .unwrap()
            .1
        })
        .collect();
    assert!(runs.iter().all(|c| c.trainable_params == 4 && c.total_params == 10));
}
