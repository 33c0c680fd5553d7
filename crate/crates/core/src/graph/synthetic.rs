//! Bipartite stochastic block model for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Interaction, InteractionLog};
use crate::error::{Error, Result};

/// Users and items are split into `blocks` contiguous groups; a user-item
/// pair in matching groups interacts with probability `p_in`, otherwise
/// `p_out`. Every user gets at least `min_user_degree` in-block items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockModel {
    pub users: usize,
    pub items: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub min_user_degree: usize,
}

impl BlockModel {
    pub fn new(users: usize, items: usize, blocks: usize, p_in: f64, p_out: f64) -> Self {
        Self {
            users,
            items,
            blocks,
            p_in,
            p_out,
            min_user_degree: 2,
        }
    }

    pub fn user_block(&self, user: usize) -> usize {
        user * self.blocks / self.users
    }

    pub fn item_block(&self, item: usize) -> usize {
        item * self.blocks / self.items
    }

    /// External ids are `u<index>` and `i<index>`, and dense indices equal
    /// generator indices, so `user_block`/`item_block` apply directly.
    pub fn generate(&self, seed: u64) -> Result<InteractionLog> {
        if self.blocks == 0 || self.blocks > self.users.min(self.items) {
            return Err(Error::invalid("BlockModel", format!("{} blocks for {} users / {} items", self.blocks, self.users, self.items)));
        }
        for p in [self.p_in, self.p_out] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("BlockModel", format!("probability {p} outside [0, 1]")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); self.users];
        for (u, row) in rows.iter_mut().enumerate() {
            let ub = self.user_block(u);
            for i in 0..self.items {
                let p = if self.item_block(i) == ub { self.p_in } else { self.p_out };
                if rng.random_bool(p) {
                    row.push(i);
                }
            }
            let block_items: Vec<usize> = (0..self.items).filter(|&i| self.item_block(i) == ub).collect();
            let target = self.min_user_degree.min(block_items.len());
            while row.len() < target {
                let i = block_items[rng.random_range(0..block_items.len())];
                if !row.contains(&i) {
                    row.push(i);
                }
            }
            row.sort_unstable();
        }
        // every item gets at least one in-block user so no index is empty
        for i in 0..self.items {
            if rows.iter().any(|r| r.binary_search(&i).is_ok()) {
                continue;
            }
            let ib = self.item_block(i);
            let block_users: Vec<usize> = (0..self.users).filter(|&u| self.user_block(u) == ib).collect();
            let u = block_users[rng.random_range(0..block_users.len())];
            let pos = rows[u].binary_search(&i).unwrap_err();
            rows[u].insert(pos, i);
        }
        let interactions = rows
            .iter()
            .enumerate()
            .flat_map(|(u, row)| {
                row.iter().map(move |&i| Interaction {
                    user: u,
                    item: i,
                    weight: 1.0,
                })
            })
            .collect();
        let user_ids = (0..self.users).map(|u| format!("u{u}")).collect();
        let item_ids = (0..self.items).map(|i| format!("i{i}")).collect();
        Ok(InteractionLog::from_parts(interactions, user_ids, item_ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_structure_dominates() {
        let model = BlockModel::new(40, 60, 4, 0.3, 0.02);
        let log = model.generate(1).unwrap();
        assert_eq!((log.num_users(), log.num_items()), (40, 60));
        let mut inside = 0;
        for x in log.interactions() {
            let item: usize = log.item_id(x.item)[1..].parse().unwrap();
            if model.user_block(x.user) == model.item_block(item) {
                inside += 1;
            }
        }
        assert!(inside as f64 > 0.7 * log.len() as f64);
        assert_eq!(log, model.generate(1).unwrap());
        let g = log.to_graph();
        assert!(g.user_degrees().iter().all(|&d| d >= 2));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(BlockModel::new(4, 4, 5, 0.5, 0.1).generate(0).is_err());
        assert!(BlockModel::new(4, 4, 2, 1.5, 0.1).generate(0).is_err());
    }
}
