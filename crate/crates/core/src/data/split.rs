use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::interactions::Interaction;
use super::prompt::RenderedSample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            valid: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!("split ratios {parts:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }

    /// End indices of the train and valid slices for `n` ordered rows.
    pub fn bounds(&self, n: usize) -> (usize, usize) {
        let a = (n as f64 * self.train).round() as usize;
        let b = (n as f64 * (self.train + self.valid)).round() as usize;
        (a.min(n), b.clamp(a.min(n), n))
    }
}

/// Sorts by timestamp, breaking ties by `(user_id, item_id)`.
pub fn temporal_sort(data: &mut [Interaction]) {
    data.sort_by(|a, b| a.temporal_key().cmp(&b.temporal_key()));
}

pub fn temporal_split(
    data: &[Interaction],
    ratios: &SplitRatios,
) -> Result<(Vec<Interaction>, Vec<Interaction>, Vec<Interaction>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("temporal_split"));
    }
    ratios.validate()?;
    let mut sorted = data.to_vec();
    temporal_sort(&mut sorted);
    let (a, b) = ratios.bounds(sorted.len());
    let test = sorted.split_off(b);
    let valid = sorted.split_off(a);
    Ok((sorted, valid, test))
}

/// Anything attributable to a user.
pub trait UserKeyed {
    fn user(&self) -> &str;
}

impl UserKeyed for Interaction {
    fn user(&self) -> &str {
        &self.user_id
    }
}

impl UserKeyed for RenderedSample {
    fn user(&self) -> &str {
        &self.user_id
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition<T> {
    pub forgotten: Vec<T>,
    pub retained: Vec<T>,
    pub user_ids: BTreeSet<String>,
}

/// Number of users sampled for forgetting: `ceil(fraction · n)`, at least one
/// and leaving at least one retained user.
pub fn forgotten_user_count(fraction: f64, n_users: usize) -> usize {
    let raw = (fraction * n_users as f64 - 1e-9).ceil().max(1.0) as usize;
    raw.min(n_users.saturating_sub(1))
}

/// Samples whole users without replacement; all of their rows leave `train`.
pub fn select_forgotten_users<T: Clone + UserKeyed>(
    train: &[T],
    fraction: f64,
    seed: u64,
) -> Result<Partition<T>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("forgotten fraction {fraction} must lie in (0, 1)")));
    }
    let users: Vec<&str> = train
        .iter()
        .map(UserKeyed::user)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if users.len() < 2 {
        return Err(Error::Partition(format!(
            "need at least 2 distinct users, found {}",
            users.len()
        )));
    }
    let k = forgotten_user_count(fraction, users.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: BTreeSet<String> = rand::seq::index::sample(&mut rng, users.len(), k)
        .into_iter()
        .map(|i| users[i].to_string())
        .collect();
    let (forgotten, retained) = train
        .iter()
        .cloned()
        .partition(|s| picked.contains(s.user()));
    Ok(Partition {
        forgotten,
        retained,
        user_ids: picked,
    })
}
