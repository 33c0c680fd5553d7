use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BipartiteGraph;
use crate::error::{Error, Result};

/// Induced subgraph together with the original index of every kept node.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGraph {
    pub graph: BipartiteGraph,
    /// `users[k]` is the original index of sampled user `k`.
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    /// Selected nodes removed afterwards because no kept edge touched them.
    pub isolated_users: usize,
    pub isolated_items: usize,
}

impl SampledGraph {
    /// Original user index -> sampled index.
    pub fn user_lookup(&self, num_original: usize) -> Vec<Option<usize>> {
        lookup(&self.users, num_original)
    }

    pub fn item_lookup(&self, num_original: usize) -> Vec<Option<usize>> {
        lookup(&self.items, num_original)
    }
}

fn lookup(kept: &[usize], n: usize) -> Vec<Option<usize>> {
    let mut out = vec![None; n];
    for (k, &orig) in kept.iter().enumerate() {
        out[orig] = Some(k);
    }
    out
}

fn kept_count(op: &'static str, keep_ratio: f64, n: usize) -> Result<usize> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::invalid(op, format!("keep_ratio {keep_ratio} outside (0, 1]")));
    }
    let k = (keep_ratio * n as f64).floor() as usize;
    if k == 0 {
        return Err(Error::invalid(op, format!("keep_ratio {keep_ratio} keeps no node out of {n}")));
    }
    Ok(k)
}

fn induce(graph: &BipartiteGraph, mut users: Vec<usize>, mut items: Vec<usize>) -> Result<SampledGraph> {
    users.sort_unstable();
    items.sort_unstable();
    let user_map = lookup(&users, graph.num_users());
    let item_map = lookup(&items, graph.num_items());
    let edges: Vec<(usize, usize)> = graph
        .edges()
        .filter_map(|(u, i)| Some((user_map[u]?, item_map[i]?)))
        .collect();

    let mut user_used = vec![false; users.len()];
    let mut item_used = vec![false; items.len()];
    for &(u, i) in &edges {
        user_used[u] = true;
        item_used[i] = true;
    }
    let compact = |used: &[bool]| -> Vec<Option<usize>> {
        let mut next = 0;
        used.iter()
            .map(|&k| {
                k.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let new_user = compact(&user_used);
    let new_item = compact(&item_used);
    let kept_users: Vec<usize> = users.iter().zip(&user_used).filter(|(_, &k)| k).map(|(&u, _)| u).collect();
    let kept_items: Vec<usize> = items.iter().zip(&item_used).filter(|(_, &k)| k).map(|(&i, _)| i).collect();
    if kept_users.is_empty() {
        return Err(Error::invalid("sample_subgraph", "induced subgraph has no edges"));
    }
    let graph = BipartiteGraph::from_edges(
        kept_users.len(),
        kept_items.len(),
        edges.iter().map(|&(u, i)| (new_user[u].unwrap(), new_item[i].unwrap())),
    )?;
    Ok(SampledGraph {
        graph,
        isolated_users: users.len() - kept_users.len(),
        isolated_items: items.len() - kept_items.len(),
        users: kept_users,
        items: kept_items,
    })
}

/// Uniformly keeps `floor(keep_ratio * N)` users and `floor(keep_ratio * M)`
/// items and induces the edges between them.
pub fn sample_subgraph_random(graph: &BipartiteGraph, keep_ratio: f64, seed: u64) -> Result<SampledGraph> {
    let nu = kept_count("sample_subgraph_random", keep_ratio, graph.num_users())?;
    let ni = kept_count("sample_subgraph_random", keep_ratio, graph.num_items())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = index::sample(&mut rng, graph.num_users(), nu).into_vec();
    let items = index::sample(&mut rng, graph.num_items(), ni).into_vec();
    induce(graph, users, items)
}

/// Keeps the highest-degree users and items; ties go to the lower index.
pub fn sample_subgraph_degree(graph: &BipartiteGraph, keep_ratio: f64) -> Result<SampledGraph> {
    let nu = kept_count("sample_subgraph_degree", keep_ratio, graph.num_users())?;
    let ni = kept_count("sample_subgraph_degree", keep_ratio, graph.num_items())?;
    let top = |degrees: Vec<usize>, k: usize| -> Vec<usize> {
        let mut order: Vec<usize> = (0..degrees.len()).collect();
        order.sort_by(|&a, &b| degrees[b].cmp(&degrees[a]).then(a.cmp(&b)));
        order.truncate(k);
        order
    };
    induce(graph, top(graph.user_degrees(), nu), top(graph.item_degrees(), ni))
}

/// Draws items with probability proportional to `degree^exponent`.
///
/// The sampler is immutable; callers bring their own seeded RNG, so one
/// instance can be shared by several workers.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    probs: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl NegativeSampler {
    pub fn new(graph: &BipartiteGraph, exponent: f64) -> Result<Self> {
        Self::from_degrees(&graph.item_degrees(), exponent)
    }

    pub fn from_degrees(degrees: &[usize], exponent: f64) -> Result<Self> {
        let weights: Vec<f64> = degrees.iter().map(|&d| (d as f64).powf(exponent)).collect();
        Self::from_weights(weights, exponent)
    }

    /// Same distribution over real-valued (soft) degrees.
    pub fn from_soft_degrees(degrees: &[f64], exponent: f64) -> Result<Self> {
        let weights: Vec<f64> = degrees.iter().map(|&d| d.max(0.0).powf(exponent)).collect();
        Self::from_weights(weights, exponent)
    }

    fn from_weights(weights: Vec<f64>, exponent: f64) -> Result<Self> {
        if !(exponent >= 0.0) {
            return Err(Error::invalid("NegativeSampler", format!("exponent {exponent} is negative")));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("NegativeSampler", "every item has zero weight"));
        }
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::invalid("NegativeSampler", e.to_string()))?;
        Ok(Self {
            probs: weights.iter().map(|w| w / total).collect(),
            dist,
        })
    }

    pub fn num_items(&self) -> usize {
        self.probs.len()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        self.dist.sample(rng)
    }

    /// Draws from the distribution restricted to items not in `excluded`
    /// (sorted ascending), e.g. the query user's positives.
    pub fn sample_excluding(&self, rng: &mut impl Rng, user: usize, excluded: &[usize]) -> Result<usize> {
        for _ in 0..32 {
            let v = self.sample(rng);
            if excluded.binary_search(&v).is_err() {
                return Ok(v);
            }
        }
        let allowed: Vec<(usize, f64)> = self
            .probs
            .iter()
            .enumerate()
            .filter(|(i, p)| **p > 0.0 && excluded.binary_search(i).is_err())
            .map(|(i, &p)| (i, p))
            .collect();
        if allowed.is_empty() {
            return Err(Error::SamplingExhausted(user));
        }
        let dist = WeightedIndex::new(allowed.iter().map(|(_, p)| *p))
            .map_err(|e| Error::invalid("NegativeSampler", e.to_string()))?;
        Ok(allowed[dist.sample(rng)].0)
    }
}

#[cfg(test)]
mod tests {
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use super::*;

    fn random_graph(seed: u64, n: usize, m: usize, p: f64) -> BipartiteGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for u in 0..n {
            for i in 0..m {
                if rng.random_bool(p) {
                    edges.push((u, i));
                }
            }
            edges.push((u, rng.random_range(0..m)));
        }
        for i in 0..m {
            edges.push((rng.random_range(0..n), i));
        }
        BipartiteGraph::from_edges(n, m, edges).unwrap()
    }

    #[test]
    fn full_ratio_is_identity() {
        let g = random_graph(1, 30, 40, 0.1);
        let r = sample_subgraph_random(&g, 1.0, 5).unwrap();
        assert_eq!(r.graph, g);
        assert_eq!(r.users, (0..30).collect::<Vec<_>>());
        let d = sample_subgraph_degree(&g, 1.0).unwrap();
        assert_eq!(d.graph, g);
    }

    #[test]
    fn random_keeps_floor_before_isolation() {
        let g = random_graph(2, 100, 60, 0.2);
        let r = sample_subgraph_random(&g, 0.8, 3).unwrap();
        assert_eq!(r.users.len() + r.isolated_users, 80);
        assert_eq!(r.items.len() + r.isolated_items, 48);
        assert_eq!(r, sample_subgraph_random(&g, 0.8, 3).unwrap());
    }

    #[test]
    fn induced_edges_match_edge_list_filter() {
        let g = random_graph(4, 50, 70, 0.08);
        let r = sample_subgraph_random(&g, 0.6, 11).unwrap();
        let users: std::collections::HashSet<usize> = r.users.iter().copied().collect();
        let items: std::collections::HashSet<usize> = r.items.iter().copied().collect();
        let oracle = g.edges().filter(|(u, i)| users.contains(u) && items.contains(i)).count();
        assert_eq!(r.graph.num_edges(), oracle);
        for (u, i) in r.graph.edges() {
            assert!(g.has_edge(r.users[u], r.items[i]));
        }
    }

    #[test]
    fn degree_sampling_keeps_the_busier_user() {
        let g = BipartiteGraph::from_edges(2, 5, [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (1, 3), (1, 4)]).unwrap();
        let d = sample_subgraph_degree(&g, 0.5).unwrap();
        assert_eq!(d.users, vec![1]);
    }

    #[test]
    fn degree_sampling_matches_sort_and_truncate() {
        // every user touches item 0, the busiest item, so no kept user is isolated
        let mut edges: Vec<(usize, usize)> = random_graph(6, 40, 30, 0.15).edges().collect();
        edges.extend((0..40).map(|u| (u, 0)));
        let g = BipartiteGraph::from_edges(40, 30, edges).unwrap();
        let d = sample_subgraph_degree(&g, 0.5).unwrap();
        assert_eq!(d.isolated_users, 0);
        let degrees = g.user_degrees();
        let mut order: Vec<usize> = (0..40).collect();
        order.sort_by_key(|&u| (std::cmp::Reverse(degrees[u]), u));
        let mut want = order[..20].to_vec();
        want.sort_unstable();
        assert_eq!(d.users, want);
    }

    #[test]
    fn exponent_zero_is_uniform() {
        let s = NegativeSampler::from_degrees(&[8, 1, 0, 3], 0.0).unwrap();
        assert!(s.probabilities().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn degree_proportional_frequencies() {
        let s = NegativeSampler::from_degrees(&[8, 1], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 100_000;
        let hits = (0..draws).filter(|_| s.sample(&mut rng) == 0).count();
        let freq = hits as f64 / draws as f64;
        assert!((freq - 8.0 / 9.0).abs() < 0.01, "{freq}");
    }

    #[test]
    fn smoothed_degree_distribution_passes_chi_square() {
        let degrees: Vec<usize> = (1..=20).map(|d| d * 3 % 17 + 1).collect();
        let s = NegativeSampler::from_degrees(&degrees, 0.75).unwrap();
        let norm: f64 = degrees.iter().map(|&d| (d as f64).powf(0.75)).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let draws = 50_000;
        let mut counts = vec![0usize; 20];
        for _ in 0..draws {
            counts[s.sample(&mut rng)] += 1;
        }
        let stat: f64 = counts
            .iter()
            .zip(&degrees)
            .map(|(&c, &d)| {
                let expected = draws as f64 * (d as f64).powf(0.75) / norm;
                (c as f64 - expected).powi(2) / expected
            })
            .sum();
        let p = 1.0 - ChiSquared::new(19.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn exclusion_and_exhaustion() {
        let s = NegativeSampler::from_degrees(&[5, 5, 5], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(s.sample_excluding(&mut rng, 0, &[0, 2]).unwrap(), 1);
        }
        assert!(matches!(s.sample_excluding(&mut rng, 4, &[0, 1, 2]), Err(Error::SamplingExhausted(4))));
        assert!(NegativeSampler::from_degrees(&[1], -1.0).is_err());
        assert!(NegativeSampler::from_degrees(&[0, 0], 1.0).is_err());
    }
}
