use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BipartiteGraph, InteractionLog};
use crate::error::{Error, Result};

/// Per-user train/test partition of an interaction log.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: BipartiteGraph,
    /// Held-out items per user, sorted.
    pub test: Vec<Vec<usize>>,
    pub split_seed: u64,
    pub ratio: f64,
    /// Users kept entirely in train because they had a single interaction.
    pub single_interaction_users: Vec<usize>,
}

impl SplitDataset {
    pub fn test_edges(&self) -> usize {
        self.test.iter().map(Vec::len).sum()
    }
}

/// Shuffles each user's items and keeps `round(ratio * n)` of them for
/// training, clamped so that every user with two or more interactions has at
/// least one train and one test item.
pub fn split(log: &InteractionLog, ratio: f64, seed: u64) -> Result<SplitDataset> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("split", format!("ratio {ratio} outside (0, 1)")));
    }
    let full = log.to_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_edges = Vec::with_capacity(full.num_edges());
    let mut test = vec![Vec::new(); full.num_users()];
    let mut singles = Vec::new();

    for (u, test_items) in test.iter_mut().enumerate() {
        let mut items = full.user_items(u).to_vec();
        let n = items.len();
        if n == 1 {
            log::warn!("user {} has a single interaction; kept in train", log.user_id(u));
            singles.push(u);
            train_edges.push((u, items[0]));
            continue;
        }
        items.shuffle(&mut rng);
        let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
        train_edges.extend(items[..n_train].iter().map(|&i| (u, i)));
        test_items.extend_from_slice(&items[n_train..]);
        test_items.sort_unstable();
    }

    Ok(SplitDataset {
        train: BipartiteGraph::from_edges(full.num_users(), full.num_items(), train_edges)?,
        test,
        split_seed: seed,
        ratio,
        single_interaction_users: singles,
    })
}
