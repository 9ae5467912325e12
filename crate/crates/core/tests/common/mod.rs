//! Shared fixtures: a one-layer micro model, hand-built samples, a small
//! synthetic bundle and a central finite-difference checker.
#![allow(dead_code)]

use e2urec_core::data::vocab::{NO_ID, YES_ID};
use e2urec_core::data::{BundleOptions, DatasetBundle, RenderedSample, SyntheticSpec};
use e2urec_core::model::{bind, Bound, ModelConfig, ModelParams, TrainMode};
use e2urec_core::Result;
use e2urec_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 12,
        lora_rank: 2,
        ..Default::default()
    }
}

/// Micro model with adapters attached and `B` randomised so every adapter
/// factor receives gradient.
pub fn micro_model(seed: u64) -> ModelParams {
    let cfg = micro_config();
    let mut p = ModelParams::init(&cfg, seed).unwrap();
    p.attach_lora(seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    for t in p.lora_mut() {
        for x in t.data_mut() {
            *x = rng.random_range(-0.3..0.3);
        }
    }
    p
}

pub fn sample(user: &str, vocab: usize, rng: &mut ChaCha8Rng) -> RenderedSample {
    let len = rng.random_range(3..10);
    let label = rng.random_range(0..2u8);
    RenderedSample {
        token_ids: (0..len).map(|_| rng.random_range(4..vocab)).collect(),
        answer_token_id: if label == 1 { YES_ID } else { NO_ID },
        user_id: user.into(),
        item_id: format!("i{}", rng.random_range(0..100)),
        timestamp: rng.random_range(0..1000),
        label,
    }
}

pub fn samples(user_prefix: &str, n: usize, vocab: usize, seed: u64) -> Vec<RenderedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| sample(&format!("{user_prefix}{}", i % 3), vocab, &mut rng))
        .collect()
}

/// Small bundle for end-to-end unlearning tests.
pub fn toy_bundle(seed: u64) -> DatasetBundle {
    let spec = SyntheticSpec {
        n_users: 30,
        n_items: 20,
        interactions_per_user: 12,
        niche_items_per_user: 1,
        seed,
        ..Default::default()
    };
    DatasetBundle::build(spec.generate().unwrap(), &BundleOptions { seed, ..Default::default() }).unwrap()
}

pub fn toy_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 48,
        ..Default::default()
    }
}

fn value(p: &ModelParams, loss: &dyn for<'p> Fn(&mut Tape<'p>, &Bound<'p>) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let b = bind(&mut tape, p, None);
    let v = loss(&mut tape, &b).unwrap();
    tape.value(v).item()
}

/// Largest relative error between the tape gradient and a central difference
/// over `probes` randomly chosen entries of the `mode` parameter group.
pub fn max_grad_error(
    params: &ModelParams,
    mode: TrainMode,
    probes: usize,
    seed: u64,
    loss: &dyn for<'p> Fn(&mut Tape<'p>, &Bound<'p>) -> Result<Var>,
) -> f64 {
    const STEP: f64 = 1e-5;
    let grads: Vec<Tensor> = {
        let mut tape = Tape::new();
        let b = bind(&mut tape, params, Some(mode));
        let v = loss(&mut tape, &b).unwrap();
        let mut g = tape.backward(v).unwrap();
        b.trained_grads(&mut g).into_iter().map(Option::unwrap).collect()
    };
    let group = |p: &ModelParams| match mode {
        TrainMode::Full => p.base().len(),
        TrainMode::Lora => p.lora().len(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let t = rng.random_range(0..group(params));
        let i = rng.random_range(0..grads[t].len());
        let mut plus = params.clone();
        let mut minus = params.clone();
        match mode {
            TrainMode::Full => {
                plus.base_mut()[t].data_mut()[i] += STEP;
                minus.base_mut()[t].data_mut()[i] -= STEP;
            }
            TrainMode::Lora => {
                plus.lora_mut()[t].data_mut()[i] += STEP;
                minus.lora_mut()[t].data_mut()[i] -= STEP;
            }
        }
        let numeric = (value(&plus, loss) - value(&minus, loss)) / (2.0 * STEP);
        let analytic = grads[t].data()[i];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
