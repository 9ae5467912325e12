//! Reproducible click logs with a planted genre-preference model.
//!
//! Each item has a genre and a latent quality; each user likes a few genres.
//! Exposure is biased toward liked genres, and clicks follow
//! `sigmoid(±match_logit + quality_scale · quality)`. Optional niche items
//! belong to a single user, so only that user's data reveals their quality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::interactions::Interaction;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_genres: usize,
    pub genres_per_user: usize,
    pub interactions_per_user: usize,
    /// Private items per user, appended after the shared catalogue.
    pub niche_items_per_user: usize,
    /// Probability that an exposure is one of the user's niche items.
    pub niche_share: f64,
    /// Probability that an exposure is drawn from the user's liked genres.
    pub liked_exposure: f64,
    pub match_logit: f64,
    pub quality_scale: f64,
    pub time_span: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 167,
            n_items: 150,
            n_genres: 8,
            genres_per_user: 2,
            interactions_per_user: 20,
            niche_items_per_user: 1,
            niche_share: 0.3,
            liked_exposure: 0.5,
            match_logit: 1.0,
            quality_scale: 3.0,
            time_span: 1_000_000,
            seed: 0,
        }
    }
}

const ADJECTIVES: &[&str] = &[
    "Silent", "Crimson", "Last", "Hidden", "Broken", "Golden", "Midnight", "Wild", "Frozen",
    "Lost", "Electric", "Hollow", "Bright", "Distant", "Iron", "Paper",
];
const NOUNS: &[&str] = &[
    "Harbor", "Empire", "Garden", "Signal", "River", "Crown", "Station", "Echo", "Valley",
    "Letter", "Orbit", "Mirror", "Storm", "Bridge", "Lantern", "Frontier",
];

/// Title of synthetic item `i`; unique for every index.
pub fn synthetic_title(i: usize) -> String {
    let a = ADJECTIVES[i % ADJECTIVES.len()];
    let n = NOUNS[(i / ADJECTIVES.len()) % NOUNS.len()];
    let round = i / (ADJECTIVES.len() * NOUNS.len());
    if round == 0 {
        format!("{a} {n}")
    } else {
        format!("{a} {n} {}", round + 1)
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_users < 2 || self.n_items < 1 || self.interactions_per_user < 1 {
            return Err(Error::Config("synthetic spec needs ≥2 users, ≥1 item, ≥1 interaction".into()));
        }
        if self.n_genres == 0 || self.genres_per_user == 0 || self.genres_per_user > self.n_genres {
            return Err(Error::Config("genres_per_user must lie in 1..=n_genres".into()));
        }
        if !(0.0..=1.0).contains(&self.liked_exposure) || !(0.0..=1.0).contains(&self.niche_share) {
            return Err(Error::Config("liked_exposure and niche_share must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Vec<Interaction>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let genre: Vec<usize> = (0..self.n_items).map(|i| i % self.n_genres).collect();
        let n_niche = self.n_users * self.niche_items_per_user;
        let quality: Vec<f64> = (0..self.n_items + n_niche)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut by_genre = vec![Vec::new(); self.n_genres];
        for (i, &g) in genre.iter().enumerate() {
            by_genre[g].push(i);
        }

        let mut out = Vec::with_capacity(self.n_users * self.interactions_per_user);
        for u in 0..self.n_users {
            let liked: Vec<usize> =
                rand::seq::index::sample(&mut rng, self.n_genres, self.genres_per_user).into_vec();
            let liked_items: Vec<usize> = liked
                .iter()
                .flat_map(|&g| by_genre[g].iter().copied())
                .collect();
            let own = self.n_items + u * self.niche_items_per_user;
            for _ in 0..self.interactions_per_user {
                if self.niche_items_per_user > 0 && rng.random_bool(self.niche_share) {
                    let item = own + rng.random_range(0..self.niche_items_per_user);
                    let logit = self.quality_scale * quality[item];
                    let label = u8::from(rng.random_bool(1.0 / (1.0 + (-logit).exp())));
                    out.push(Interaction {
                        user_id: format!("u{u:05}"),
                        item_id: format!("i{item:05}"),
                        item_title: synthetic_title(item),
                        timestamp: rng.random_range(0..self.time_span.max(1)),
                        label,
                    });
                    continue;
                }
                let item = if !liked_items.is_empty() && rng.random_bool(self.liked_exposure) {
                    liked_items[rng.random_range(0..liked_items.len())]
                } else {
                    rng.random_range(0..self.n_items)
                };
                let sign = if liked.contains(&genre[item]) { 1.0 } else { -1.0 };
                let logit = sign * self.match_logit + self.quality_scale * quality[item];
                let p = 1.0 / (1.0 + (-logit).exp());
                let label = u8::from(rng.random_bool(p));
                out.push(Interaction {
                    user_id: format!("u{u:05}"),
                    item_id: format!("i{item:05}"),
                    item_title: synthetic_title(item),
                    timestamp: rng.random_range(0..self.time_span.max(1)),
                    label,
                });
            }
        }
        Ok(out)
    }
}
