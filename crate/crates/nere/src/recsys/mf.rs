//! Matrix-factorization baseline: id embeddings plus linear feature
//! maps into a shared latent space, trained by SGD on observed positives
//! against sampled negatives, scored by inner product.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NereError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfConfig {
    pub d: usize,
    pub epochs: usize,
    pub lr: f64,
    pub negatives_per_positive: usize,
    pub rng_seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig {
            d: 32,
            epochs: 30,
            lr: 0.05,
            negatives_per_positive: 4,
            rng_seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MfBaseline {
    pub d: usize,
    user_index: BTreeMap<u64, usize>,
    item_index: BTreeMap<u64, usize>,
    item_ids: Vec<u64>,
    /// id embeddings, row-major [n, d]
    p: Vec<f64>,
    q: Vec<f64>,
    /// feature maps, row-major [d, f]
    a: Vec<f64>,
    b: Vec<f64>,
    fu: usize,
    fi: usize,
    user_feats: BTreeMap<u64, Vec<f64>>,
    item_feats: BTreeMap<u64, Vec<f64>>,
}

impl MfBaseline {
    fn user_vec(&self, user: u64) -> Option<Vec<f64>> {
        let base = self.user_index.get(&user).map(|&r| {
            self.p[r * self.d..(r + 1) * self.d].to_vec()
        });
        let mut v = base?;
        if self.fu > 0 {
            if let Some(f) = self.user_feats.get(&user) {
                for (i, vi) in v.iter_mut().enumerate() {
                    for (j, fj) in f.iter().enumerate() {
                        *vi += self.a[i * self.fu + j] * fj;
                    }
                }
            }
        }
        Some(v)
    }

    fn item_vec(&self, row: usize) -> Vec<f64> {
        let mut v = self.q[row * self.d..(row + 1) * self.d].to_vec();
        if self.fi > 0 {
            if let Some(f) = self.item_feats.get(&self.item_ids[row]) {
                for (i, vi) in v.iter_mut().enumerate() {
                    for (j, fj) in f.iter().enumerate() {
                        *vi += self.b[i * self.fi + j] * fj;
                    }
                }
            }
        }
        v
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }
}

pub fn train_mf_baseline(
    interactions: &[(u64, u64)],
    user_features: &BTreeMap<u64, Vec<f64>>,
    item_features: &BTreeMap<u64, Vec<f64>>,
    config: &MfConfig,
) -> Result<MfBaseline> {
    if config.d == 0 {
        return Err(NereError::Config("latent dimension d must be >= 1".into()));
    }
    if interactions.is_empty() {
        return Err(NereError::Precondition(
            "cannot factorize an empty interaction set".into(),
        ));
    }
    let d = config.d;
    let mut user_index = BTreeMap::new();
    let mut item_index = BTreeMap::new();
    let mut item_ids = Vec::new();
    for &(u, i) in interactions {
        let next = user_index.len();
        user_index.entry(u).or_insert(next);
        if let std::collections::btree_map::Entry::Vacant(e) = item_index.entry(i) {
            e.insert(item_ids.len());
            item_ids.push(i);
        }
    }
    let fu = user_features.values().next().map(|v| v.len()).unwrap_or(0);
    let fi = item_features.values().next().map(|v| v.len()).unwrap_or(0);
    for v in user_features.values() {
        if v.len() != fu {
            return Err(NereError::Shape("ragged user feature vectors".into()));
        }
    }
    for v in item_features.values() {
        if v.len() != fi {
            return Err(NereError::Shape("ragged item feature vectors".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let scale = 1.0 / (d as f64).sqrt();
    let mut init = |n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    };
    let mut model = MfBaseline {
        d,
        p: init(user_index.len() * d),
        q: init(item_index.len() * d),
        a: init(d * fu),
        b: init(d * fi),
        user_index,
        item_index,
        item_ids,
        fu,
        fi,
        user_feats: user_features.clone(),
        item_feats: item_features.clone(),
    };
    let n_items = model.item_ids.len();
    let mut order: Vec<usize> = (0..interactions.len()).collect();
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            let (u, i) = interactions[k];
            let ur = model.user_index[&u];
            let ir = model.item_index[&i];
            sgd_pair(&mut model, u, ur, ir, 1.0, config.lr);
            for _ in 0..config.negatives_per_positive {
                let jr = rng.gen_range(0..n_items);
                if jr == ir {
                    continue;
                }
                sgd_pair(&mut model, u, ur, jr, 0.0, config.lr);
            }
        }
    }
    Ok(model)
}

fn sgd_pair(model: &mut MfBaseline, user: u64, ur: usize, ir: usize, target: f64, lr: f64) {
    let uvec = model.user_vec(user).unwrap();
    let ivec = model.item_vec(ir);
    let score: f64 = uvec.iter().zip(&ivec).map(|(a, b)| a * b).sum();
    let err = score - target;
    let d = model.d;
    for j in 0..d {
        model.p[ur * d + j] -= lr * err * ivec[j];
        model.q[ir * d + j] -= lr * err * uvec[j];
    }
    if model.fu > 0 {
        if let Some(f) = model.user_feats.get(&user).cloned() {
            for (j, iv) in ivec.iter().enumerate() {
                for (k, fk) in f.iter().enumerate() {
                    model.a[j * model.fu + k] -= lr * err * iv * fk;
                }
            }
        }
    }
    if model.fi > 0 {
        if let Some(f) = model.item_feats.get(&model.item_ids[ir]).cloned() {
            for (j, uv) in uvec.iter().enumerate() {
                for (k, fk) in f.iter().enumerate() {
                    model.b[j * model.fi + k] -= lr * err * uv * fk;
                }
            }
        }
    }
}

/// Top-m item ids by inner-product score, ties broken by ascending id.
pub fn mf_recommend(model: &MfBaseline, user: u64, m: usize) -> Result<Vec<u64>> {
    if m > model.n_items() {
        return Err(NereError::Precondition(format!(
            "m = {m} exceeds the item count {}",
            model.n_items()
        )));
    }
    let uvec = model
        .user_vec(user)
        .ok_or_else(|| NereError::State(format!("unknown user {user}")))?;
    let mut scored: Vec<(f64, u64)> = (0..model.n_items())
        .map(|r| {
            let ivec = model.item_vec(r);
            let s: f64 = uvec.iter().zip(&ivec).map(|(a, b)| a * b).sum();
            (s, model.item_ids[r])
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
    });
    Ok(scored.into_iter().take(m).map(|(_, id)| id).collect())
}
