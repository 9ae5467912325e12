use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::interactions::Interaction;
use super::prompt::{answer_token, render_prompt, PromptOptions, RenderedSample};
use super::split::{select_forgotten_users, temporal_sort, SplitRatios};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleOptions {
    pub ratios: SplitRatios,
    pub forgotten_fraction: f64,
    pub prompt: PromptOptions,
    pub seed: u64,
}

impl Default for BundleOptions {
    fn default() -> Self {
        Self {
            ratios: SplitRatios::default(),
            forgotten_fraction: 0.2,
            prompt: PromptOptions::default(),
            seed: 0,
        }
    }
}

/// Rendered splits plus the forgotten/retained partition of `train`.
///
/// Valid and test are shared by every method regardless of which users are
/// forgotten.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub vocab: Vocabulary,
    pub train: Vec<RenderedSample>,
    pub valid: Vec<RenderedSample>,
    pub test: Vec<RenderedSample>,
    pub forgotten: Vec<RenderedSample>,
    pub retained: Vec<RenderedSample>,
    pub forgotten_user_ids: BTreeSet<String>,
}

impl DatasetBundle {
    /// Sorts the log globally, renders each event against its user's prior
    /// positive interactions, then splits and partitions.
    pub fn build(mut data: Vec<Interaction>, opts: &BundleOptions) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("interaction log"));
        }
        opts.ratios.validate()?;
        temporal_sort(&mut data);
        let vocab = Vocabulary::build(data.iter().map(|r| r.item_title.as_str()));

        let mut history: HashMap<&str, Vec<&str>> = HashMap::new();
        let mut rendered = Vec::with_capacity(data.len());
        for row in &data {
            let past = history.entry(row.user_id.as_str()).or_default();
            let token_ids = render_prompt(past, &row.item_title, &vocab, &opts.prompt)?;
            rendered.push(RenderedSample {
                token_ids,
                answer_token_id: answer_token(row.label),
                user_id: row.user_id.clone(),
                item_id: row.item_id.clone(),
                timestamp: row.timestamp,
                label: row.label,
            });
            if row.label == 1 {
                past.push(row.item_title.as_str());
            }
        }

        let (a, b) = opts.ratios.bounds(rendered.len());
        let test = rendered.split_off(b);
        let valid = rendered.split_off(a);
        let train = rendered;
        let part = select_forgotten_users(&train, opts.forgotten_fraction, opts.seed)?;
        Ok(Self {
            vocab,
            train,
            valid,
            test,
            forgotten: part.forgotten,
            retained: part.retained,
            forgotten_user_ids: part.user_ids,
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).expect("bundle serialises");
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut bundle: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        bundle.vocab = bundle.vocab.reindex();
        Ok(bundle)
    }

    /// One JSON object per rendered sample, with the detokenised prompt.
    pub fn dump_rendered(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            split: &'a str,
            prompt: String,
            #[serde(flatten)]
            sample: &'a RenderedSample,
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for (split, rows) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            for s in rows {
                let line = Line {
                    split,
                    prompt: self.vocab.detokenize(&s.token_ids)?,
                    sample: s,
                };
                serde_json::to_writer(&mut w, &line).expect("sample serialises");
                w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn max_prompt_len(&self) -> usize {
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .map(|s| s.token_ids.len())
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::SyntheticSpec;

    fn bundle(seed: u64) -> DatasetBundle {
        let spec = SyntheticSpec {
            n_users: 20,
            interactions_per_user: 10,
            seed,
            ..Default::default()
        };
        DatasetBundle::build(spec.generate().unwrap(), &BundleOptions { seed, ..Default::default() })
            .unwrap()
    }

    #[test]
    fn invariants_hold() {
        let b = bundle(5);
        assert_eq!((b.train.len(), b.valid.len(), b.test.len()), (120, 40, 40));
        assert_eq!(b.forgotten.len() + b.retained.len(), b.train.len());
        assert_eq!(b.forgotten_user_ids.len(), 4);
        assert!(b.forgotten.iter().all(|s| b.forgotten_user_ids.contains(&s.user_id)));
        assert!(b.retained.iter().all(|s| !b.forgotten_user_ids.contains(&s.user_id)));
        let max_train = b.train.iter().map(|s| s.timestamp).max().unwrap();
        assert!(b.valid.iter().all(|s| s.timestamp >= max_train));
        let max_valid = b.valid.iter().map(|s| s.timestamp).max().unwrap();
        assert!(b.test.iter().all(|s| s.timestamp >= max_valid));
    }

    #[test]
    fn history_is_prior_positives_only() {
        let spec = SyntheticSpec {
            n_users: 3,
            interactions_per_user: 30,
            ..Default::default()
        };
        let mut rows = spec.generate().unwrap();
        let b = DatasetBundle::build(rows.clone(), &BundleOptions::default()).unwrap();
        temporal_sort(&mut rows);
        let all: Vec<&RenderedSample> = b.train.iter().chain(&b.valid).chain(&b.test).collect();
        for (i, s) in all.iter().enumerate() {
            let mut past: Vec<&str> = rows[..i]
                .iter()
                .filter(|r| r.user_id == s.user_id && r.label == 1)
                .map(|r| r.item_title.as_str())
                .collect();
            let keep = past.len().saturating_sub(10);
            past.drain(..keep);
            let want = render_prompt(&past, &rows[i].item_title, &b.vocab, &PromptOptions::default())
                .unwrap();
            assert_eq!(s.token_ids, want);
        }
    }

    #[test]
    fn json_round_trip() {
        let b = bundle(1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bundle.json");
        b.save_json(&p).unwrap();
        assert_eq!(DatasetBundle::load_json(&p).unwrap(), b);
        let d = dir.path().join("rendered.jsonl");
        b.dump_rendered(&d).unwrap();
        let text = std::fs::read_to_string(d).unwrap();
        assert_eq!(text.lines().count(), 200);
        assert!(text.lines().next().unwrap().contains("Please deduce"));
    }

    #[test]
    fn detokenize_round_trips_every_prompt() {
        let b = bundle(2);
        for s in &b.train {
            let text = b.vocab.detokenize(&s.token_ids).unwrap();
            assert!(text.ends_with('.'));
            assert!(text.contains("Please deduce if he will like the movie "));
        }
    }
}
