//! User-item interaction data: logs, bipartite graphs, filtering, splitting
//! and sampling.

mod filter;
mod io;
mod sampling;
mod split;
pub mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

pub use filter::k_core_filter;
pub use io::{load_interactions, load_interactions_as, parse_interactions, parse_interactions_as, EdgeFormat};
pub use sampling::{sample_subgraph_degree, sample_subgraph_random, NegativeSampler, SampledGraph};
pub use split::{split, SplitDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub weight: f64,
}

/// Deduplicated interactions over dense, contiguous user and item indices,
/// with the external identifiers each index came from.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    interactions: Vec<Interaction>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
}

/// Incrementally assigns dense indices in first-appearance order.
#[derive(Debug, Default)]
pub struct LogBuilder {
    interactions: Vec<Interaction>,
    seen: std::collections::HashSet<(usize, usize)>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

impl LogBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `false` when the pair was already present.
    pub fn push(&mut self, user: &str, item: &str) -> bool {
        let u = intern(&mut self.user_index, &mut self.user_ids, user);
        let i = intern(&mut self.item_index, &mut self.item_ids, item);
        if !self.seen.insert((u, i)) {
            return false;
        }
        self.interactions.push(Interaction {
            user: u,
            item: i,
            weight: 1.0,
        });
        true
    }

    pub fn build(self) -> Result<InteractionLog> {
        if self.interactions.is_empty() {
            return Err(Error::EmptyLog);
        }
        Ok(InteractionLog {
            interactions: self.interactions,
            user_ids: self.user_ids,
            item_ids: self.item_ids,
        })
    }
}

fn intern(index: &mut HashMap<String, usize>, ids: &mut Vec<String>, key: &str) -> usize {
    if let Some(&i) = index.get(key) {
        return i;
    }
    let i = ids.len();
    ids.push(key.to_owned());
    index.insert(key.to_owned(), i);
    i
}

impl InteractionLog {
    /// Builds a log from already-dense pairs; external ids are the indices
    /// themselves. Users and items that never appear are dropped and the
    /// remaining indices re-densified.
    pub fn from_dense_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut b = LogBuilder::new();
        for (u, i) in pairs {
            b.push(&u.to_string(), &i.to_string());
        }
        b.build()
    }

    pub(crate) fn from_parts(
        interactions: Vec<Interaction>,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
    ) -> Self {
        Self {
            interactions,
            user_ids,
            item_ids,
        }
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn user_id(&self, user: usize) -> &str {
        &self.user_ids[user]
    }

    pub fn item_id(&self, item: usize) -> &str {
        &self.item_ids[item]
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_ids.iter().position(|u| u == id)
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_ids.iter().position(|i| i == id)
    }

    pub fn to_graph(&self) -> BipartiteGraph {
        BipartiteGraph::from_edges(
            self.num_users(),
            self.num_items(),
            self.interactions.iter().map(|x| (x.user, x.item)),
        )
        .expect("log indices are dense")
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats::new(self.num_users(), self.num_items(), self.len())
    }
}

/// Undirected user-item graph. Users and items live in separate index
/// spaces, so a user-user or item-item edge cannot be expressed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph {
    num_users: usize,
    num_items: usize,
    user_adj: Vec<Vec<usize>>,
    item_adj: Vec<Vec<usize>>,
    num_edges: usize,
}

impl BipartiteGraph {
    /// Duplicate pairs collapse to one edge.
    pub fn from_edges(
        num_users: usize,
        num_items: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut user_adj = vec![Vec::new(); num_users];
        let mut item_adj = vec![Vec::new(); num_items];
        for (u, i) in edges {
            if u >= num_users || i >= num_items {
                return Err(Error::invalid(
                    "BipartiteGraph::from_edges",
                    format!("edge ({u}, {i}) outside {num_users} users x {num_items} items"),
                ));
            }
            user_adj[u].push(i);
            item_adj[i].push(u);
        }
        for list in user_adj.iter_mut().chain(item_adj.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        let num_edges = user_adj.iter().map(Vec::len).sum();
        Ok(Self {
            num_users,
            num_items,
            user_adj,
            item_adj,
            num_edges,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    /// Sorted items of `user`.
    pub fn user_items(&self, user: usize) -> &[usize] {
        &self.user_adj[user]
    }

    /// Sorted users of `item`.
    pub fn item_users(&self, item: usize) -> &[usize] {
        &self.item_adj[item]
    }

    pub fn user_degree(&self, user: usize) -> usize {
        self.user_adj[user].len()
    }

    pub fn item_degree(&self, item: usize) -> usize {
        self.item_adj[item].len()
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        self.user_adj.iter().map(Vec::len).collect()
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        self.item_adj.iter().map(Vec::len).collect()
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        self.user_adj[user].binary_search(&item).is_ok()
    }

    /// Edges in user-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.user_adj
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }

    /// `N x M` 0/1 matrix.
    pub fn biadjacency(&self) -> Matrix {
        let mut m = Matrix::zeros((self.num_users, self.num_items));
        for (u, i) in self.edges() {
            m[[u, i]] = 1.0;
        }
        m
    }

    /// Symmetric `(N + M) x (N + M)` adjacency with users first.
    pub fn dense_adjacency(&self) -> Matrix {
        let n = self.num_nodes();
        let mut m = Matrix::zeros((n, n));
        for (u, i) in self.edges() {
            m[[u, self.num_users + i]] = 1.0;
            m[[self.num_users + i, u]] = 1.0;
        }
        m
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats::new(self.num_users, self.num_items, self.num_edges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub users: usize,
    pub items: usize,
    pub edges: usize,
    pub density_pct: f64,
}

impl GraphStats {
    pub fn new(users: usize, items: usize, edges: usize) -> Self {
        let cells = users as f64 * items as f64;
        let density_pct = if cells > 0.0 {
            100.0 * edges as f64 / cells
        } else {
            0.0
        };
        Self {
            users,
            items,
            edges,
            density_pct,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }
}

pub fn stats(graph: &BipartiteGraph) -> GraphStats {
    graph.stats()
}
