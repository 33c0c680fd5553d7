//! BPR recommender trained on a bipartite graph, top-K ranking, and the
//! mapping that lets a model trained on a condensed graph rank the items of
//! the original one.

use std::cmp::Ordering;
use std::io::Write;

use ndarray::{Array1, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, Matrix};
use crate::error::{Error, Result};
use crate::graph::{BipartiteGraph, NegativeSampler};

/// Which graph a [`RecModel`] was fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainedOn {
    Original,
    Condensed,
    Sampled,
}

/// How BPR draws the negative item of a triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NegSampling {
    /// Uniform over the user's unobserved items.
    Uniform,
    /// Proportional to `degree^exponent` over unobserved items.
    Degree(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BprConfig {
    pub dim: usize,
    pub lr: f64,
    pub epochs: usize,
    /// L2 weight on the three embeddings touched by a triple.
    pub reg: f64,
    pub init_std: f64,
    pub neg: NegSampling,
    pub seed: u64,
}

impl BprConfig {
    pub fn new(dim: usize, epochs: usize, seed: u64) -> Self {
        Self {
            dim,
            lr: 0.05,
            epochs,
            reg: 1e-4,
            init_std: 0.1,
            neg: NegSampling::Uniform,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be a finite value > 0"));
        }
        if !(self.reg >= 0.0 && self.init_std > 0.0) {
            return Err(Error::config("reg", "reg must be >= 0 and init_std > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecModel {
    pub user_emb: Matrix,
    pub item_emb: Matrix,
    pub trained_on: TrainedOn,
    pub lr: f64,
    pub epochs: usize,
    /// Mean triple loss of every epoch.
    pub losses: Vec<f64>,
}

/// `-ln σ(e_u·e_p - e_u·e_n)`.
pub fn triple_loss(eu: ArrayView1<f64>, ep: ArrayView1<f64>, en: ArrayView1<f64>) -> f64 {
    softplus(-(eu.dot(&ep) - eu.dot(&en)))
}

/// Gradients of [`triple_loss`] with respect to `(e_u, e_p, e_n)`.
pub fn triple_grad(
    eu: ArrayView1<f64>,
    ep: ArrayView1<f64>,
    en: ArrayView1<f64>,
) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let x = eu.dot(&ep) - eu.dot(&en);
    let g = -sigmoid(-x);
    ((&ep - &en) * g, &eu * g, &eu * -g)
}

/// Fits BPR by per-triple SGD: every epoch visits each observed edge once in
/// shuffled order and pairs it with one sampled negative.
pub fn bpr_train(graph: &BipartiteGraph, config: &BprConfig, trained_on: TrainedOn) -> Result<RecModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dist = Normal::new(0.0, config.init_std).map_err(|e| Error::invalid("bpr_train", e.to_string()))?;
    let user_emb = Matrix::from_shape_simple_fn((graph.num_users(), config.dim), || dist.sample(&mut rng));
    let item_emb = Matrix::from_shape_simple_fn((graph.num_items(), config.dim), || dist.sample(&mut rng));
    bpr_train_from(graph, config, trained_on, user_emb, item_emb)
}

/// [`bpr_train`] starting from the given embeddings.
pub fn bpr_train_from(
    graph: &BipartiteGraph,
    config: &BprConfig,
    trained_on: TrainedOn,
    user_emb: Matrix,
    item_emb: Matrix,
) -> Result<RecModel> {
    let mut trainer = BprTrainer::new(graph.clone(), config, user_emb, item_emb)?;
    for _ in 0..config.epochs {
        trainer.epoch()?;
    }
    Ok(trainer.finish(trained_on))
}

/// Epoch-at-a-time BPR state, for callers that time or interleave epochs.
#[derive(Debug, Clone)]
pub struct BprTrainer {
    graph: BipartiteGraph,
    config: BprConfig,
    rng: ChaCha8Rng,
    sampler: Option<NegativeSampler>,
    edges: Vec<(usize, usize)>,
    user_emb: Matrix,
    item_emb: Matrix,
    losses: Vec<f64>,
}

impl BprTrainer {
    pub fn new(graph: BipartiteGraph, config: &BprConfig, user_emb: Matrix, item_emb: Matrix) -> Result<Self> {
        config.validate()?;
        if graph.num_edges() == 0 {
            return Err(Error::invalid("bpr_train", "graph has no edges"));
        }
        if user_emb.dim() != (graph.num_users(), config.dim) || item_emb.dim() != (graph.num_items(), config.dim) {
            return Err(Error::invalid("bpr_train", "initial embeddings do not match graph size and dim"));
        }
        // Separate stream from initialization so warm starts sample the same triples.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let sampler = match config.neg {
            NegSampling::Uniform => None,
            NegSampling::Degree(exponent) => Some(NegativeSampler::new(&graph, exponent)?),
        };
        let num_items = graph.num_items();
        let edges: Vec<(usize, usize)> = graph
            .edges()
            .filter(|&(u, _)| {
                let saturated = graph.user_degree(u) == num_items;
                if saturated {
                    log::debug!("user {u} interacted with every item; skipped");
                }
                !saturated
            })
            .collect();
        if edges.is_empty() {
            return Err(Error::invalid("bpr_train", "every user interacted with every item"));
        }
        Ok(Self {
            graph,
            config: config.clone(),
            rng,
            sampler,
            edges,
            user_emb,
            item_emb,
            losses: Vec::new(),
        })
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// One pass over the shuffled edges; returns the mean triple loss.
    pub fn epoch(&mut self) -> Result<f64> {
        let Self {
            graph,
            config,
            rng,
            sampler,
            edges,
            user_emb,
            item_emb,
            ..
        } = self;
        let num_items = graph.num_items();
        let decay = 1.0 - config.lr * config.reg;
        let step = |mut row: ndarray::ArrayViewMut1<f64>, g: &Array1<f64>| {
            row.zip_mut_with(g, |w, &gw| *w = decay * *w - config.lr * gw);
        };
        edges.shuffle(rng);
        let mut total = 0.0;
        for &(u, p) in edges.iter() {
            let seen = graph.user_items(u);
            let n = match sampler {
                Some(s) => s.sample_excluding(rng, u, seen)?,
                None => loop {
                    let n = rng.random_range(0..num_items);
                    if seen.binary_search(&n).is_err() {
                        break n;
                    }
                },
            };
            let (eu, ep, en) = (user_emb.row(u), item_emb.row(p), item_emb.row(n));
            total += triple_loss(eu, ep, en);
            let (gu, gp, gn) = triple_grad(eu, ep, en);
            step(user_emb.row_mut(u), &gu);
            step(item_emb.row_mut(p), &gp);
            step(item_emb.row_mut(n), &gn);
        }
        let loss = total / edges.len() as f64;
        if !loss.is_finite() || !user_emb.iter().chain(item_emb.iter()).all(|x| x.is_finite()) {
            return Err(Error::invalid("bpr_train", "training diverged; lower the learning rate"));
        }
        self.losses.push(loss);
        Ok(loss)
    }

    pub fn embeddings(&self) -> (&Matrix, &Matrix) {
        (&self.user_emb, &self.item_emb)
    }

    pub fn finish(self, trained_on: TrainedOn) -> RecModel {
        RecModel {
            user_emb: self.user_emb,
            item_emb: self.item_emb,
            trained_on,
            lr: self.config.lr,
            epochs: self.losses.len(),
            losses: self.losses,
        }
    }
}

impl RecModel {
    pub fn num_users(&self) -> usize {
        self.user_emb.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item_emb.nrows()
    }

    pub fn dim(&self) -> usize {
        self.user_emb.ncols()
    }

    pub fn score(&self, user: usize, item: usize) -> f64 {
        self.user_emb.row(user).dot(&self.item_emb.row(item))
    }

    /// Scores of `user` against every item.
    pub fn scores(&self, user: usize) -> Array1<f64> {
        self.item_emb.dot(&self.user_emb.row(user))
    }

    pub fn top_k(&self, user: usize, k: usize, exclude: &[usize]) -> Result<TopK> {
        top_k(self.scores(user).as_slice().expect("contiguous"), k, exclude)
    }
}

/// A ranked list; `short` is set when fewer than K candidates existed.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
    pub short: bool,
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("top_k", "K must be at least 1"));
    }
    Ok(())
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// The K highest scores outside `exclude` (sorted ascending), best first,
/// ties by ascending item index.
pub fn top_k(scores: &[f64], k: usize, exclude: &[usize]) -> Result<TopK> {
    check_k(k)?;
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|i| exclude.binary_search(i).is_err()).collect();
    let short = candidates.len() < k;
    let cmp = by_score_then_index(scores);
    if !short {
        candidates.select_nth_unstable_by(k - 1, &cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(&cmp);
    Ok(TopK {
        scores: candidates.iter().map(|&i| scores[i]).collect(),
        items: candidates,
        short,
    })
}

/// Original node -> condensed representative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub user_map: Vec<usize>,
    pub item_map: Vec<usize>,
    /// Similarity of each node to its representative: cosine, or negative
    /// Euclidean distance where the fallback applied.
    pub user_sim: Vec<f64>,
    pub item_sim: Vec<f64>,
}

const ZERO_NORM: f64 = 1e-12;

fn norms(m: &Matrix) -> Array1<f64> {
    m.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

/// Row-wise nearest neighbour of `query` among `candidates`: argmax cosine,
/// or argmin Euclidean distance for a zero-norm query. Ties go to the lower
/// candidate index.
fn nearest(query: &Matrix, candidates: &Matrix) -> (Vec<usize>, Vec<f64>) {
    let qn = norms(query);
    let cn = norms(candidates);
    let dots = query.dot(&candidates.t());
    let mut map = Vec::with_capacity(query.nrows());
    let mut sim = Vec::with_capacity(query.nrows());
    for (r, row) in dots.outer_iter().enumerate() {
        let score = |c: usize| -> f64 {
            if qn[r] < ZERO_NORM {
                // ‖q - c‖² = ‖c‖² when q is zero.
                -cn[c]
            } else if cn[c] < ZERO_NORM {
                0.0
            } else {
                row[c] / (qn[r] * cn[c])
            }
        };
        let mut best = 0;
        let mut best_score = score(0);
        for c in 1..candidates.nrows() {
            let s = score(c);
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        map.push(best);
        sim.push(best_score);
    }
    (map, sim)
}

/// Seeded Gaussian map `R^from -> R^to` scaled by `1/sqrt(to)`; inner
/// products are preserved in expectation.
pub fn random_projection(from: usize, to: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0 / (to as f64).sqrt()).expect("positive std");
    Matrix::from_shape_simple_fn((from, to), || dist.sample(&mut rng))
}

/// Maps every original user and item to its most similar condensed one.
///
/// `h_users`/`h_items` describe the original nodes and `cond_users`/
/// `cond_items` the condensed ones. When widths differ the wider side is
/// projected down with [`random_projection`].
pub fn assign_representatives(
    h_users: &Matrix,
    h_items: &Matrix,
    cond_users: &Matrix,
    cond_items: &Matrix,
    projection_seed: u64,
) -> Result<Assignment> {
    if cond_users.nrows() == 0 || cond_items.nrows() == 0 {
        return Err(Error::invalid("assign_representatives", "condensed side has no users or items"));
    }
    if h_users.ncols() != h_items.ncols() || cond_users.ncols() != cond_items.ncols() {
        return Err(Error::invalid("assign_representatives", "user and item widths differ"));
    }
    let (hd, cd) = (h_users.ncols(), cond_users.ncols());
    let project = |m: &Matrix, from: usize, to: usize| m.dot(&random_projection(from, to, projection_seed));
    let (hu, hi, cu, ci);
    let (hu, hi, cu, ci) = match hd.cmp(&cd) {
        Ordering::Equal => (h_users, h_items, cond_users, cond_items),
        Ordering::Greater => {
            hu = project(h_users, hd, cd);
            hi = project(h_items, hd, cd);
            (&hu, &hi, cond_users, cond_items)
        }
        Ordering::Less => {
            cu = project(cond_users, cd, hd);
            ci = project(cond_items, cd, hd);
            (h_users, h_items, &cu, &ci)
        }
    };
    let (user_map, user_sim) = nearest(hu, cu);
    let (item_map, item_sim) = nearest(hi, ci);
    Ok(Assignment {
        user_map,
        item_map,
        user_sim,
        item_sim,
    })
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na < ZERO_NORM || nb < ZERO_NORM {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Ranks original items for original user `user` with a model trained on
/// the condensed graph. The primary key is the score between the
/// representatives, the secondary key the cosine of the original relay
/// embeddings, then ascending item index.
pub fn recommend_for_original(
    user: usize,
    model: &RecModel,
    assign: &Assignment,
    h_users: &Matrix,
    h_items: &Matrix,
    k: usize,
    exclude: &[usize],
) -> Result<TopK> {
    check_k(k)?;
    let rep_u = assign.user_map[user];
    let rep_scores = model.scores(rep_u);
    let hu = h_users.row(user);
    let mut keyed: Vec<(usize, f64, f64)> = (0..assign.item_map.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .map(|i| (i, rep_scores[assign.item_map[i]], cosine(hu, h_items.row(i))))
        .collect();
    let short = keyed.len() < k;
    let cmp = |a: &(usize, f64, f64), b: &(usize, f64, f64)| {
        b.1.total_cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0))
    };
    if !short {
        keyed.select_nth_unstable_by(k - 1, cmp);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(cmp);
    Ok(TopK {
        items: keyed.iter().map(|t| t.0).collect(),
        scores: keyed.iter().map(|t| t.1).collect(),
        short,
    })
}

/// One line of the ranked-list output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub user: String,
    pub items: Vec<String>,
    pub scores: Vec<f64>,
}

pub fn write_jsonl(mut out: impl Write, lists: &[RankedList]) -> Result<()> {
    for l in lists {
        serde_json::to_writer(&mut out, l)?;
        out.write_all(b"\n").map_err(|e| Error::io("<ranked lists>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::Rng as _;

    use super::*;
    use crate::graph::synthetic::BlockModel;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn triple_loss_values() {
        let e = array![0.3, -0.2];
        assert_abs_diff_eq!(triple_loss(e.view(), e.view(), e.view()), 2f64.ln(), epsilon = 1e-15);
        let u = array![50.0, 0.0];
        let p = array![1.0, 0.0];
        let n = array![-1.0, 0.0];
        assert!(triple_loss(u.view(), p.view(), n.view()) < 1e-40);
    }

    #[test]
    fn triple_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v: Vec<Array1<f64>> = (0..3).map(|_| Array1::from_shape_simple_fn(8, || rng.random_range(-1.0..1.0))).collect();
            let (gu, gp, gn) = triple_grad(v[0].view(), v[1].view(), v[2].view());
            for (which, analytic) in [gu, gp, gn].iter().enumerate() {
                for d in 0..8 {
                    let h = 1e-5;
                    let mut plus = v.clone();
                    let mut minus = v.clone();
                    plus[which][d] += h;
                    minus[which][d] -= h;
                    let f = |w: &[Array1<f64>]| triple_loss(w[0].view(), w[1].view(), w[2].view());
                    let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                    let rel = (numeric - analytic[d]).abs() / analytic[d].abs().max(1e-8);
                    assert!(rel < 1e-6, "component {which}/{d}: {numeric} vs {}", analytic[d]);
                }
            }
        }
    }

    #[test]
    fn bpr_loss_decreases() {
        let log = BlockModel::new(10, 15, 2, 0.6, 0.05).generate(4).unwrap();
        let g = log.to_graph();
        let cfg = BprConfig::new(16, 20, 7);
        let m = bpr_train(&g, &cfg, TrainedOn::Original).unwrap();
        assert_eq!(m.losses.len(), 20);
        assert!(m.losses[19] < m.losses[0], "{:?}", m.losses);
        let again = bpr_train(&g, &cfg, TrainedOn::Original).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn saturated_users_are_skipped() {
        // User 0 has every item; user 1 does not.
        let g = BipartiteGraph::from_edges(2, 3, [(0, 0), (0, 1), (0, 2), (1, 0)]).unwrap();
        let m = bpr_train(&g, &BprConfig::new(4, 3, 1), TrainedOn::Original).unwrap();
        assert_eq!(m.losses.len(), 3);
        let full = BipartiteGraph::from_edges(1, 2, [(0, 0), (0, 1)]).unwrap();
        assert!(bpr_train(&full, &BprConfig::new(4, 3, 1), TrainedOn::Original).is_err());
    }

    #[test]
    fn degree_negatives_train() {
        let g = BlockModel::new(10, 15, 2, 0.6, 0.05).generate(4).unwrap().to_graph();
        let mut cfg = BprConfig::new(8, 10, 2);
        cfg.neg = NegSampling::Degree(0.75);
        let m = bpr_train(&g, &cfg, TrainedOn::Original).unwrap();
        assert!(m.losses[9] < m.losses[0]);
    }

    #[test]
    fn score_examples() {
        let m = RecModel {
            user_emb: array![[1.0, 0.0], [0.6, 0.8]],
            item_emb: array![[0.0, 1.0], [0.6, 0.8]],
            trained_on: TrainedOn::Original,
            lr: 0.0,
            epochs: 0,
            losses: vec![],
        };
        assert_eq!(m.score(0, 0), 0.0);
        assert_abs_diff_eq!(m.score(1, 1), 1.0, epsilon = 1e-15);
        let u = random_matrix(1, 8, 1);
        let i = random_matrix(1, 8, 2);
        let m = RecModel { user_emb: u.clone(), item_emb: i.clone(), ..m };
        let mut looped = 0.0;
        for d in 0..8 {
            looped += u[[0, d]] * i[[0, d]];
        }
        assert_abs_diff_eq!(m.score(0, 0), looped, epsilon = 1e-14);
    }

    #[test]
    fn top_k_examples() {
        let t = top_k(&[0.9, 0.1, 0.5], 2, &[]).unwrap();
        assert_eq!(t.items, vec![0, 2]);
        assert!(!t.short);
        assert_eq!(top_k(&[0.3; 5], 3, &[]).unwrap().items, vec![0, 1, 2]);
        let t = top_k(&[0.9, 0.1, 0.5], 5, &[0]).unwrap();
        assert_eq!(t.items, vec![2, 1]);
        assert!(t.short);
        assert!(top_k(&[1.0], 0, &[]).is_err());
    }

    #[test]
    fn top_k_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            // Coarse values force ties.
            let scores: Vec<f64> = (0..100).map(|_| (rng.random_range(0..30) as f64) / 10.0).collect();
            let mut exclude: Vec<usize> = (0..100).filter(|_| rng.random_bool(0.2)).collect();
            exclude.sort_unstable();
            let mut oracle: Vec<usize> = (0..100).filter(|i| !exclude.contains(i)).collect();
            oracle.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            oracle.truncate(20);
            assert_eq!(top_k(&scores, 20, &exclude).unwrap().items, oracle);
        }
    }

    #[test]
    fn assignment_examples() {
        let h = random_matrix(6, 4, 1);
        let hi = random_matrix(5, 4, 2);
        let a = assign_representatives(&h, &hi, &h, &hi, 0).unwrap();
        assert_eq!(a.user_map, (0..6).collect::<Vec<_>>());
        assert_eq!(a.item_map, (0..5).collect::<Vec<_>>());
        let one = random_matrix(1, 4, 3);
        let a = assign_representatives(&h, &hi, &one, &one, 0).unwrap();
        assert!(a.user_map.iter().all(|&r| r == 0));
        // Different widths go through the projection.
        let wide = random_matrix(3, 9, 4);
        let a = assign_representatives(&h, &hi, &wide, &wide, 0).unwrap();
        assert!(a.user_map.iter().all(|&r| r < 3));
    }

    #[test]
    fn assignment_matches_all_pairs_oracle() {
        let hu = random_matrix(30, 6, 5);
        let hi = random_matrix(30, 6, 6);
        let cu = random_matrix(12, 6, 7);
        let ci = random_matrix(9, 6, 8);
        let a = assign_representatives(&hu, &hi, &cu, &ci, 0).unwrap();
        let oracle = |q: &Matrix, c: &Matrix| -> Vec<usize> {
            (0..q.nrows())
                .map(|r| {
                    let mut best = (0, f64::NEG_INFINITY);
                    for k in 0..c.nrows() {
                        let mut dot = 0.0;
                        let mut nq = 0.0;
                        let mut nc = 0.0;
                        for d in 0..q.ncols() {
                            dot += q[[r, d]] * c[[k, d]];
                            nq += q[[r, d]] * q[[r, d]];
                            nc += c[[k, d]] * c[[k, d]];
                        }
                        let cos = dot / (nq.sqrt() * nc.sqrt());
                        if cos > best.1 {
                            best = (k, cos);
                        }
                    }
                    best.0
                })
                .collect()
        };
        assert_eq!(a.user_map, oracle(&hu, &cu));
        assert_eq!(a.item_map, oracle(&hi, &ci));
    }

    #[test]
    fn zero_norm_falls_back_to_euclidean() {
        let q = array![[0.0, 0.0], [1.0, 0.0]];
        let c = array![[3.0, 0.0], [0.0, 0.5], [2.0, 0.1]];
        let a = assign_representatives(&q, &q, &c, &c, 0).unwrap();
        assert_eq!(a.user_map, vec![1, 0]);
    }

    fn model(users: Matrix, items: Matrix) -> RecModel {
        RecModel {
            user_emb: users,
            item_emb: items,
            trained_on: TrainedOn::Condensed,
            lr: 0.0,
            epochs: 0,
            losses: vec![],
        }
    }

    #[test]
    fn primary_key_dominates_and_secondary_breaks_ties() {
        // Items 0, 1 share representative 0; item 2 has representative 1.
        let m = model(array![[1.0]], array![[0.1], [0.9]]);
        let assign = Assignment {
            user_map: vec![0],
            item_map: vec![0, 0, 1],
            user_sim: vec![1.0],
            item_sim: vec![1.0; 3],
        };
        let hu = array![[1.0, 0.0]];
        let hi = array![[0.0, 1.0], [1.0, 0.1], [-1.0, 0.0]];
        let t = recommend_for_original(0, &m, &assign, &hu, &hi, 3, &[]).unwrap();
        // Item 2's representative wins despite the worst cosine; item 1
        // beats item 0 on cosine.
        assert_eq!(t.items, vec![2, 1, 0]);
    }

    #[test]
    fn recommend_matches_lexicographic_oracle() {
        let m = model(random_matrix(4, 3, 1), random_matrix(5, 3, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let assign = Assignment {
            user_map: (0..10).map(|_| rng.random_range(0..4)).collect(),
            item_map: (0..40).map(|_| rng.random_range(0..5)).collect(),
            user_sim: vec![0.0; 10],
            item_sim: vec![0.0; 40],
        };
        let hu = random_matrix(10, 6, 4);
        let hi = random_matrix(40, 6, 5);
        for u in 0..10 {
            let exclude = vec![u, u + 10];
            let t = recommend_for_original(u, &m, &assign, &hu, &hi, 15, &exclude).unwrap();
            let mut keys: Vec<(usize, f64, f64)> = (0..40)
                .filter(|i| !exclude.contains(i))
                .map(|i| {
                    let primary = m.score(assign.user_map[u], assign.item_map[i]);
                    let (a, b) = (hu.row(u), hi.row(i));
                    let secondary = a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
                    (i, primary, secondary)
                })
                .collect();
            keys.sort_by(|a, b| {
                b.1.partial_cmp(&a.1).unwrap().then(b.2.partial_cmp(&a.2).unwrap()).then(a.0.cmp(&b.0))
            });
            let oracle: Vec<usize> = keys.iter().take(15).map(|k| k.0).collect();
            assert_eq!(t.items, oracle);
        }
    }

    #[test]
    fn identity_assignment_reproduces_top_k() {
        let m = model(random_matrix(8, 5, 1), random_matrix(12, 5, 2));
        let assign = assign_representatives(&m.user_emb, &m.item_emb, &m.user_emb, &m.item_emb, 0).unwrap();
        for u in 0..8 {
            let exclude = vec![u];
            let direct = m.top_k(u, 5, &exclude).unwrap();
            let mapped = recommend_for_original(u, &m, &assign, &m.user_emb, &m.item_emb, 5, &exclude).unwrap();
            assert_eq!(direct.items, mapped.items);
            assert_eq!(direct.scores, mapped.scores);
        }
    }

    #[test]
    fn jsonl_lines_parse() {
        let lists = vec![
            RankedList { user: "u1".into(), items: vec!["i3".into()], scores: vec![0.5] },
            RankedList { user: "u2".into(), items: vec![], scores: vec![] },
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &lists).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let back: Vec<RankedList> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, lists);
    }

    proptest! {
        #[test]
        fn top_k_order_is_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
            let m = model(random_matrix(3, 4, seed), random_matrix(30, 4, seed + 1));
            let scaled = model(&m.user_emb * c, &m.item_emb * c);
            for u in 0..3 {
                prop_assert_eq!(m.top_k(u, 10, &[]).unwrap().items, scaled.top_k(u, 10, &[]).unwrap().items);
                prop_assert!((scaled.score(u, 0) - c * c * m.score(u, 0)).abs() < 1e-9 * (1.0 + (c * c * m.score(u, 0)).abs()));
            }
        }

        #[test]
        fn top_k_never_returns_excluded(seed in 0u64..1000, k in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
            let exclude: Vec<usize> = (0..30).filter(|_| rng.random_bool(0.3)).collect();
            let t = top_k(&scores, k, &exclude).unwrap();
            prop_assert!(t.items.iter().all(|i| !exclude.contains(i)));
            prop_assert_eq!(t.items.len(), k.min(30 - exclude.len()));
        }
    }
}
