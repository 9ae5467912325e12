use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{FinetuneConfig, Method};
use crate::data::{CsvFormat, PromptOptions, SplitRatios, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};
use crate::unlearn::UnlearnConfig;

/// Where interactions come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv {
        path: PathBuf,
        #[serde(default = "comma")]
        delimiter: char,
    },
}

fn comma() -> char {
    ','
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

impl DataSource {
    pub fn csv_format(delimiter: char) -> Result<CsvFormat> {
        u8::try_from(delimiter)
            .map(|delimiter| CsvFormat { delimiter })
            .map_err(|_| Error::Config(format!("delimiter {delimiter:?} is not a single byte")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub split: SplitRatios,
    pub forgotten_fraction: f64,
    pub prompt: PromptOptions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::default(),
            split: SplitRatios::default(),
            forgotten_fraction: 0.2,
            prompt: PromptOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SisaConfig {
    pub n_shards: usize,
}

impl Default for SisaConfig {
    fn default() -> Self {
        Self { n_shards: 4 }
    }
}

/// Full experiment description. `seed` drives every component seed and
/// `model.vocab_size` is replaced by the size of the data vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub methods: Vec<Method>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub unlearn: UnlearnConfig,
    pub finetune: FinetuneConfig,
    pub sisa: SisaConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            methods: Method::ALL.to_vec(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            unlearn: UnlearnConfig::default(),
            finetune: FinetuneConfig::default(),
            sisa: SisaConfig::default(),
        }
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Copy with `seed` pushed into every component.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let DataSource::Synthetic(spec) = &mut c.data.source {
            spec.seed = c.seed;
        }
        c.train.seed = c.seed;
        c.unlearn.seed = c.seed;
        c.finetune.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if let DataSource::Synthetic(spec) = &self.data.source {
            spec.validate()?;
        }
        if let DataSource::Csv { delimiter, .. } = &self.data.source {
            DataSource::csv_format(*delimiter)?;
        }
        self.data.split.validate()?;
        if !(0.0 < self.data.forgotten_fraction && self.data.forgotten_fraction < 1.0) {
            return Err(Error::Config("forgotten_fraction must lie in (0, 1)".into()));
        }
        if self.model.max_seq_len < self.data.prompt.max_seq_len {
            return Err(Error::Config(format!(
                "model.max_seq_len {} is below prompt.max_seq_len {}",
                self.model.max_seq_len, self.data.prompt.max_seq_len
            )));
        }
        self.train.validate()?;
        self.unlearn.validate()?;
        if self.sisa.n_shards == 0 {
            return Err(Error::Config("sisa.n_shards must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the resolved config, ignoring the output directory.
    pub fn digest(&self) -> String {
        let mut c = self.resolved();
        c.out_dir = PathBuf::new();
        sha_hex(&serde_json::to_vec(&c).expect("config serialises"))
    }

    /// Digest of the parts that determine the data bundle.
    pub fn data_digest(&self) -> String {
        let c = self.resolved();
        sha_hex(&serde_json::to_vec(&(&c.data, c.seed)).expect("config serialises"))
    }

    /// Digest of the parts that determine the original and retrained models.
    pub fn training_digest(&self) -> String {
        let c = self.resolved();
        sha_hex(&serde_json::to_vec(&(&c.data, &c.model, &c.train, c.seed)).expect("config serialises"))
    }
}
