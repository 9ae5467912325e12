use e2urec_tensor::{Adam, Param, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::{LoraTarget, ModelConfig};
use crate::error::{Error, Result};

/// Which parameter group receives gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Every base weight trains; adapters (if any) stay fixed.
    Full,
    /// Only adapter factors train; the base is frozen.
    Lora,
}

/// Slot offsets of one transformer block inside the base parameter list.
pub(crate) mod slot {
    pub const TOK_EMB: usize = 0;
    pub const POS_EMB: usize = 1;
    pub const LAYERS_START: usize = 2;
    pub const PER_LAYER: usize = 16;

    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const WK: usize = 4;
    pub const WV: usize = 6;
    pub const WO: usize = 8;
    pub const LN2_G: usize = 10;
    pub const LN2_B: usize = 11;
    pub const W1: usize = 12;
    pub const B1: usize = 13;
    pub const W2: usize = 14;
    pub const B2: usize = 15;

    pub const LAYER_NAMES: [&str; PER_LAYER] = [
        "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
        "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
    ];
}

/// Frozen base weights plus optional low-rank adapters.
///
/// The base list follows a fixed layout (embeddings, blocks, final norm,
/// output head). Adapters are stored as `[A, B]` pairs per (layer, target)
/// with `A: r×d_in` and `B: d_out×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub(crate) config: ModelConfig,
    pub(crate) base: Vec<Tensor>,
    pub(crate) lora: Vec<Tensor>,
    pub(crate) lora_enabled: bool,
}

fn base_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f) = (c.vocab_size, c.d_model, c.d_ff);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![c.max_seq_len, d]),
    ];
    for l in 0..c.n_layers {
        let shapes: [Vec<usize>; slot::PER_LAYER] = [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ];
        for (name, shape) in slot::LAYER_NAMES.iter().zip(shapes) {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("ln_f.gain".into(), vec![d]));
    out.push(("ln_f.bias".into(), vec![d]));
    out.push(("head.w".into(), vec![d, v]));
    out.push(("head.b".into(), vec![v]));
    out
}

fn is_gain(name: &str) -> bool {
    name.ends_with(".gain")
}

fn is_bias(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|last| last.starts_with('b'))
}

impl ModelParams {
    /// Seeded initialisation: weights `N(0, init_std²)`, biases zero, gains
    /// one. Adapters are not attached.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = base_shapes(config)
            .into_iter()
            .map(|(name, shape)| {
                if is_gain(&name) {
                    Tensor::full(&shape, 1.0)
                } else if shape.len() == 1 && is_bias(&name) {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::randn(&shape, config.init_std, &mut rng)
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            base,
            lora: Vec::new(),
            lora_enabled: false,
        })
    }

    pub(crate) fn init_shell(
        config: ModelConfig,
        base: Vec<Tensor>,
        lora: Vec<Tensor>,
        lora_enabled: bool,
    ) -> Self {
        Self {
            config,
            base,
            lora,
            lora_enabled,
        }
    }

    pub(crate) fn expected_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        base_shapes(config).into_iter().map(|(_, s)| s).collect()
    }

    /// Attaches fresh adapters: `A ~ N(0, 0.02²)`, `B = 0`, so the adapted
    /// model starts exactly at the base model.
    pub fn attach_lora(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, d) = (self.config.lora_rank, self.config.d_model);
        self.lora.clear();
        for _ in 0..self.config.n_layers {
            for _ in self.config.targets() {
                self.lora.push(Tensor::randn(&[r, d], 0.02, &mut rng));
                self.lora.push(Tensor::zeros(&[d, r]));
            }
        }
        self.lora_enabled = true;
    }

    /// Drops adapters, returning to the bare base model.
    pub fn detach_lora(&mut self) {
        self.lora.clear();
        self.lora_enabled = false;
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lora_enabled(&self) -> bool {
        self.lora_enabled
    }

    pub fn set_lora_enabled(&mut self, on: bool) {
        self.lora_enabled = on && !self.lora.is_empty();
    }

    pub fn base(&self) -> &[Tensor] {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut [Tensor] {
        &mut self.base
    }

    pub fn lora(&self) -> &[Tensor] {
        &self.lora
    }

    pub fn lora_mut(&mut self) -> &mut [Tensor] {
        &mut self.lora
    }

    pub fn base_names(&self) -> Vec<String> {
        base_shapes(&self.config).into_iter().map(|(n, _)| n).collect()
    }

    pub fn lora_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.lora.is_empty() {
            return out;
        }
        for l in 0..self.config.n_layers {
            for t in self.config.targets() {
                out.push(format!("layers.{l}.lora.{}.a", t.short()));
                out.push(format!("layers.{l}.lora.{}.b", t.short()));
            }
        }
        out
    }

    pub fn base_index(&self, name: &str) -> Option<usize> {
        self.base_names().iter().position(|n| n == name)
    }

    /// Index of the `A` factor for `(layer, target)` in the adapter list.
    pub(crate) fn lora_slot(&self, layer: usize, target: LoraTarget) -> Option<usize> {
        if !self.lora_enabled {
            return None;
        }
        let targets = self.config.targets();
        let t = targets.iter().position(|&x| x == target)?;
        Some((layer * targets.len() + t) * 2)
    }

    pub fn head_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        let n = self.base.len();
        let (a, b) = self.base.split_at_mut(n - 1);
        (&mut a[n - 2], &mut b[0])
    }

    pub fn base_count(&self) -> usize {
        self.base.iter().map(Tensor::len).sum()
    }

    pub fn lora_count(&self) -> usize {
        self.lora.iter().map(Tensor::len).sum()
    }

    /// Exact `(total, trainable)` counts for a training mode.
    pub fn count_params(&self, mode: TrainMode) -> ParamCount {
        let total = self.base_count() + self.lora_count();
        let trainable = match mode {
            TrainMode::Full => self.base_count(),
            TrainMode::Lora => self.lora_count(),
        };
        ParamCount { total, trainable }
    }

    /// SHA-256 over the raw bytes of the base weights.
    pub fn base_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.base {
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Applies one optimizer step to the trainable group.
    pub(crate) fn apply(
        &mut self,
        opt: &mut Adam,
        mode: TrainMode,
        grads: &[Option<Tensor>],
    ) -> Result<()> {
        let names = match mode {
            TrainMode::Full => self.base_names(),
            TrainMode::Lora => self.lora_names(),
        };
        let group = match mode {
            TrainMode::Full => &mut self.base,
            TrainMode::Lora => &mut self.lora,
        };
        if grads.len() != group.len() {
            return Err(Error::Config(format!(
                "got {} gradients for {} parameters",
                grads.len(),
                group.len()
            )));
        }
        let mut params: Vec<Param<'_>> = group
            .iter_mut()
            .zip(&names)
            .zip(grads)
            .map(|((value, name), grad)| Param {
                name,
                value,
                grad: grad.as_ref(),
                trainable: true,
            })
            .collect();
        opt.step(&mut params)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_closed_form() {
        let cfg = ModelConfig::default();
        let mut p = ModelParams::init(&cfg, 0).unwrap();
        assert_eq!(p.base_count(), cfg.base_param_count());
        assert_eq!(p.base.len(), p.base_names().len());
        p.attach_lora(1);
        assert_eq!(p.lora_count(), cfg.lora_param_count());
        assert_eq!(p.lora.len(), p.lora_names().len());
    }

    #[test]
    fn init_roles() {
        let p = ModelParams::init(&ModelConfig::default(), 0).unwrap();
        let names = p.base_names();
        for (n, t) in names.iter().zip(&p.base) {
            if n.ends_with(".gain") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{n}");
            } else if t.shape().len() == 1 {
                assert!(t.data().iter().all(|&v| v == 0.0), "{n}");
            } else {
                assert!(t.data().iter().any(|&v| v != 0.0), "{n}");
            }
        }
    }

    #[test]
    fn counts_by_mode() {
        let mut p = ModelParams::init(&ModelConfig::default(), 0).unwrap();
        let full = p.count_params(TrainMode::Full);
        assert_eq!(full.trainable, full.total);
        p.attach_lora(0);
        let lora = p.count_params(TrainMode::Lora);
        assert_eq!(lora.trainable, p.config.lora_param_count());
        assert!((lora.trainable as f64) / (lora.total as f64) < 0.02);
    }

    #[test]
    fn doubling_rank_doubles_trainable() {
        let cfg = ModelConfig::default();
        let cfg2 = ModelConfig {
            lora_rank: cfg.lora_rank * 2,
            ..cfg.clone()
        };
        let mut a = ModelParams::init(&cfg, 0).unwrap();
        let mut b = ModelParams::init(&cfg2, 0).unwrap();
        a.attach_lora(0);
        b.attach_lora(0);
        assert_eq!(
            b.count_params(TrainMode::Lora).trainable,
            2 * a.count_params(TrainMode::Lora).trainable
        );
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(&cfg, 9).unwrap();
        let b = ModelParams::init(&cfg, 9).unwrap();
        assert_eq!(a.base_hash(), b.base_hash());
        let c = ModelParams::init(&cfg, 10).unwrap();
        assert_ne!(a.base_hash(), c.base_hash());
    }
}
