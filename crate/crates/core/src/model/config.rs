use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Projection matrices that can carry a low-rank adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    pub fn short(self) -> &'static str {
        match self {
            LoraTarget::Query => "q",
            LoraTarget::Key => "k",
            LoraTarget::Value => "v",
            LoraTarget::Output => "o",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub lora_targets: Vec<LoraTarget>,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 128,
            max_seq_len: 128,
            lora_rank: 4,
            lora_scale: 16.0,
            lora_targets: vec![LoraTarget::Query, LoraTarget::Value],
            init_std: 0.02,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.lora_rank == 0 || self.lora_rank >= self.d_model {
            return fail(format!(
                "lora_rank {} must satisfy 1 <= r < d_model {}",
                self.lora_rank, self.d_model
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return fail("n_layers, d_ff and max_seq_len must be positive".into());
        }
        if !(self.lora_scale.is_finite() && self.init_std > 0.0 && self.layer_norm_eps > 0.0) {
            return fail("lora_scale, init_std and layer_norm_eps must be finite and positive".into());
        }
        Ok(())
    }

    /// Adapter targets in canonical order without duplicates.
    pub fn targets(&self) -> Vec<LoraTarget> {
        let mut t = self.lora_targets.clone();
        t.sort();
        t.dedup();
        t
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form base parameter count.
    pub fn base_param_count(&self) -> usize {
        let (v, d, f, s) = (self.vocab_size, self.d_model, self.d_ff, self.max_seq_len);
        let per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
        v * d + s * d + self.n_layers * per_layer + 2 * d + d * v + v
    }

    /// Closed-form adapter count: `2·r·d` per adapted square projection.
    pub fn lora_param_count(&self) -> usize {
        self.n_layers * self.targets().len() * 2 * self.lora_rank * self.d_model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            ModelConfig { n_heads: 3, ..Default::default() },
            ModelConfig { lora_rank: 0, ..Default::default() },
            ModelConfig { lora_rank: 64, ..Default::default() },
            ModelConfig { vocab_size: 2, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn targets_are_canonical() {
        let cfg = ModelConfig {
            lora_targets: vec![LoraTarget::Value, LoraTarget::Query, LoraTarget::Value],
            ..Default::default()
        };
        assert_eq!(cfg.targets(), vec![LoraTarget::Query, LoraTarget::Value]);
    }
}
