use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RenderedSample;
use crate::error::{Error, Result};
use crate::model::{train_original, ClickScorer, ModelConfig, ModelParams, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardStrategy {
    Random,
    BalancedSimilarity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub n_shards: usize,
    pub assignment: BTreeMap<String, usize>,
    pub strategy: ShardStrategy,
}

fn users_of(train: &[RenderedSample]) -> BTreeSet<&str> {
    train.iter().map(|s| s.user_id.as_str()).collect()
}

fn check_shards(n_users: usize, n_shards: usize) -> Result<()> {
    if n_shards == 0 {
        return Err(Error::Config("n_shards must be positive".into()));
    }
    if n_users < n_shards {
        return Err(Error::Config(format!(
            "{n_users} users cannot fill {n_shards} shards"
        )));
    }
    Ok(())
}

impl ShardPlan {
    /// Shuffled round-robin assignment of users to shards.
    pub fn random(train: &[RenderedSample], n_shards: usize, seed: u64) -> Result<Self> {
        let mut users: Vec<&str> = users_of(train).into_iter().collect();
        check_shards(users.len(), n_shards)?;
        users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let assignment = users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.to_string(), i % n_shards))
            .collect();
        Ok(Self {
            n_shards,
            assignment,
            strategy: ShardStrategy::Random,
        })
    }

    pub fn shard_of(&self, user: &str) -> Option<usize> {
        self.assignment.get(user).copied()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_shards];
        for &k in self.assignment.values() {
            s[k] += 1;
        }
        s
    }

    /// Largest shard allowed by the balance rule: `ceil(1.2 · n / k)`.
    pub fn capacity(n_users: usize, n_shards: usize) -> usize {
        (12 * n_users).div_ceil(10 * n_shards)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Balanced k-means over unit-normalised user–item incidence vectors.
///
/// Centroids start from a seeded farthest-point sweep. Each round sorts all
/// (user, centroid) pairs by distance and assigns greedily under the
/// capacity bound, then recomputes centroids, until assignments settle.
pub fn receraser_plan(train: &[RenderedSample], n_shards: usize, seed: u64) -> Result<ShardPlan> {
    let users: Vec<&str> = users_of(train).into_iter().collect();
    check_shards(users.len(), n_shards)?;
    let items: Vec<&str> = train
        .iter()
        .map(|s| s.item_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let item_ix: BTreeMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let user_ix: BTreeMap<&str, usize> = users.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let mut x = vec![vec![0.0; items.len()]; users.len()];
    for s in train {
        x[user_ix[s.user_id.as_str()]][item_ix[s.item_id.as_str()]] = 1.0;
    }
    for row in &mut x {
        let n = row.iter().sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..users.len()).collect();
    order.shuffle(&mut rng);
    let mut centroids = vec![x[order[0]].clone()];
    while centroids.len() < n_shards {
        let far = order
            .iter()
            .copied()
            .max_by(|&a, &b| {
                let da = centroids.iter().map(|c| sq_dist(&x[a], c)).fold(f64::INFINITY, f64::min);
                let db = centroids.iter().map(|c| sq_dist(&x[b], c)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("at least one user");
        centroids.push(x[far].clone());
    }

    let cap = ShardPlan::capacity(users.len(), n_shards);
    let mut assign = vec![usize::MAX; users.len()];
    for _ in 0..50 {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(users.len() * n_shards);
        for (u, xu) in x.iter().enumerate() {
            for (k, c) in centroids.iter().enumerate() {
                pairs.push((sq_dist(xu, c), u, k));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = vec![usize::MAX; users.len()];
        let mut fill = vec![0; n_shards];
        for (_, u, k) in pairs {
            if next[u] == usize::MAX && fill[k] < cap {
                next[u] = k;
                fill[k] += 1;
            }
        }
        let settled = next == assign;
        assign = next;
        if settled {
            break;
        }
        for (k, c) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..users.len()).filter(|&u| assign[u] == k).collect();
            if members.is_empty() {
                continue;
            }
            c.iter_mut().for_each(|v| *v = 0.0);
            for &u in &members {
                for (cv, xv) in c.iter_mut().zip(&x[u]) {
                    *cv += xv / members.len() as f64;
                }
            }
        }
    }
    let assignment = users
        .iter()
        .zip(&assign)
        .map(|(u, &k)| (u.to_string(), k))
        .collect();
    Ok(ShardPlan {
        n_shards,
        assignment,
        strategy: ShardStrategy::BalancedSimilarity,
    })
}

/// Seed of shard `k` derived from the run seed.
pub fn shard_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k as u64 + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub index: usize,
    pub seed: u64,
    pub samples: Vec<RenderedSample>,
    pub model: ModelParams,
}

/// Independently trained sub-models whose click probabilities are averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardEnsemble {
    pub plan: ShardPlan,
    pub shards: Vec<Shard>,
}

/// Trains one shard model on `samples` with the shard's own seed.
pub fn train_shard(
    config: &ModelConfig,
    samples: &[RenderedSample],
    valid: &[RenderedSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelParams> {
    let cfg = TrainConfig { seed, ..cfg.clone() };
    Ok(train_original(config, samples, valid, &cfg)?.0)
}

pub fn sisa_train(
    config: &ModelConfig,
    train: &[RenderedSample],
    valid: &[RenderedSample],
    plan: &ShardPlan,
    cfg: &TrainConfig,
) -> Result<ShardEnsemble> {
    let mut parts = vec![Vec::new(); plan.n_shards];
    for s in train {
        let k = plan.shard_of(&s.user_id).ok_or_else(|| {
            Error::Partition(format!("user `{}` has no shard", s.user_id))
        })?;
        parts[k].push(s.clone());
    }
    let mut shards = Vec::with_capacity(plan.n_shards);
    for (k, samples) in parts.into_iter().enumerate() {
        if samples.is_empty() {
            warn!("shard {k} holds no samples and is left out of the ensemble");
            continue;
        }
        let seed = shard_seed(cfg.seed, k);
        let model = train_shard(config, &samples, valid, cfg, seed)?;
        shards.push(Shard {
            index: k,
            seed,
            samples,
            model,
        });
    }
    if shards.is_empty() {
        return Err(Error::EmptyDataset("every shard"));
    }
    Ok(ShardEnsemble {
        plan: plan.clone(),
        shards,
    })
}

/// Drops `d_f` from every affected shard and retrains only those shards with
/// their original seeds. Returns the indices of retrained shards.
pub fn sisa_unlearn(
    ensemble: &ShardEnsemble,
    d_f: &[RenderedSample],
    valid: &[RenderedSample],
    cfg: &TrainConfig,
) -> Result<(ShardEnsemble, Vec<usize>)> {
    let users: BTreeSet<&str> = d_f.iter().map(|s| s.user_id.as_str()).collect();
    let mut out = ensemble.clone();
    out.shards.clear();
    let mut retrained = Vec::new();
    for shard in &ensemble.shards {
        if !shard.samples.iter().any(|s| users.contains(s.user_id.as_str())) {
            out.shards.push(shard.clone());
            continue;
        }
        let kept: Vec<RenderedSample> = shard
            .samples
            .iter()
            .filter(|s| !users.contains(s.user_id.as_str()))
            .cloned()
            .collect();
        if kept.is_empty() {
            warn!("shard {} is empty after deletion and is removed", shard.index);
            continue;
        }
        let config = shard.model.config().clone();
        let model = train_shard(&config, &kept, valid, cfg, shard.seed)?;
        retrained.push(shard.index);
        out.shards.push(Shard {
            index: shard.index,
            seed: shard.seed,
            samples: kept,
            model,
        });
    }
    if out.shards.is_empty() {
        return Err(Error::EmptyDataset("every shard after deletion"));
    }
    Ok((out, retrained))
}

impl ShardEnsemble {
    pub fn total_params(&self) -> usize {
        self.shards.iter().map(|s| s.model.base_count()).sum()
    }
}

impl ClickScorer for ShardEnsemble {
    fn p_click(&self, sample: &RenderedSample) -> Result<f64> {
        let mut sum = 0.0;
        for s in &self.shards {
            sum += s.model.p_click(sample)?;
        }
        Ok(sum / self.shards.len() as f64)
    }
}
