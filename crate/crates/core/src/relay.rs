//! Proxy GNNs trained on link prediction. They are only used to compare how
//! the original and the condensed graph train a model, never for the final
//! recommendations.

use std::fmt;
use std::str::FromStr;

use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Backbone {
    Gcn,
    Sage,
    Gat,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Gcn, Backbone::Sage, Backbone::Gat];
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Gcn => "gcn",
            Backbone::Sage => "sage",
            Backbone::Gat => "gat",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Backbone::Gcn),
            "sage" | "graphsage" => Ok(Backbone::Sage),
            "gat" => Ok(Backbone::Gat),
            other => Err(Error::config("backbone", format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayConfig {
    pub backbone: Backbone,
    pub layers: usize,
    pub in_dim: usize,
    pub hidden_dim: usize,
}

impl RelayConfig {
    pub fn new(backbone: Backbone, layers: usize, in_dim: usize, hidden_dim: usize) -> Result<Self> {
        if layers == 0 || in_dim == 0 || hidden_dim == 0 {
            return Err(Error::invalid("RelayConfig", "layers and dimensions must be at least 1"));
        }
        Ok(Self {
            backbone,
            layers,
            in_dim,
            hidden_dim,
        })
    }

    /// Shapes of every parameter matrix, in registration order.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for l in 0..self.layers {
            let fan_in = if l == 0 { self.in_dim } else { self.hidden_dim };
            let h = self.hidden_dim;
            match self.backbone {
                Backbone::Gcn => out.push((fan_in, h)),
                Backbone::Sage => out.extend([(fan_in, h), (fan_in, h)]),
                Backbone::Gat => out.extend([(fan_in, h), (h, 1), (h, 1)]),
            }
        }
        out
    }

    fn per_layer(&self) -> usize {
        match self.backbone {
            Backbone::Gcn => 1,
            Backbone::Sage => 2,
            Backbone::Gat => 3,
        }
    }

    /// Runs the network on `tape`. `theta` holds one node per entry of
    /// [`RelayConfig::shapes`]; `adj` is a square 0/1 or soft adjacency and
    /// `x` the node features.
    pub fn forward_on(&self, tape: &mut Tape, theta: &[Var], adj: Var, x: Var) -> Result<Var> {
        let shapes = self.shapes();
        if theta.len() != shapes.len() {
            return Err(Error::invalid("relay forward", format!("expected {} parameters, got {}", shapes.len(), theta.len())));
        }
        let n = tape.shape(x).0;
        if tape.shape(adj) != (n, n) {
            return Err(Error::Shape {
                op: "relay forward",
                lhs: tape.shape(adj),
                rhs: tape.shape(x),
            });
        }
        let prop = match self.backbone {
            Backbone::Gcn => Some(gcn_norm(tape, adj)?),
            Backbone::Sage => Some(row_normalize(tape, adj)?),
            Backbone::Gat => None,
        };
        let support = match self.backbone {
            Backbone::Gat => {
                // every node attends to itself, as in the GCN propagation
                let eye = tape.constant(Matrix::eye(n));
                Some(tape.add(adj, eye)?)
            }
            _ => None,
        };
        let mut h = x;
        for l in 0..self.layers {
            let p = &theta[l * self.per_layer()..(l + 1) * self.per_layer()];
            h = match self.backbone {
                Backbone::Gcn => {
                    let hw = tape.matmul(h, p[0])?;
                    tape.matmul(prop.expect("gcn"), hw)?
                }
                Backbone::Sage => {
                    let own = tape.matmul(h, p[0])?;
                    let agg = tape.matmul(prop.expect("sage"), h)?;
                    let nb = tape.matmul(agg, p[1])?;
                    tape.add(own, nb)?
                }
                Backbone::Gat => {
                    let wh = tape.matmul(h, p[0])?;
                    let att = gat_attention(tape, support.expect("gat"), wh, p[1], p[2])?;
                    tape.matmul(att, wh)?
                }
            };
            if l + 1 < self.layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row sums of `A + I`.
fn gcn_norm(tape: &mut Tape, adj: Var) -> Result<Var> {
    let n = tape.shape(adj).0;
    let eye = tape.constant(Matrix::eye(n));
    let a = tape.add(adj, eye)?;
    let deg = tape.row_sums(a);
    let root = tape.sqrt(deg);
    let one = tape.scalar_constant(1.0);
    let inv = tape.div(one, root)?;
    let left = tape.mul(a, inv)?;
    let inv_t = tape.transpose(inv);
    tape.mul(left, inv_t)
}

/// Adds a self-loop to every row of `adj` that has no weight at all.
fn with_fallback_loops(tape: &mut Tape, adj: Var) -> Result<Var> {
    let v = tape.value(adj);
    let n = v.nrows();
    let empty: Vec<bool> = v.rows().into_iter().map(|r| r.iter().all(|&x| x == 0.0)).collect();
    if !empty.iter().any(|&e| e) {
        return Ok(adj);
    }
    let loops = Matrix::from_shape_fn((n, n), |(i, j)| f64::from(u8::from(i == j && empty[i])));
    let loops = tape.constant(loops);
    tape.add(adj, loops)
}

fn row_normalize(tape: &mut Tape, adj: Var) -> Result<Var> {
    let a = with_fallback_loops(tape, adj)?;
    let deg = tape.row_sums(a);
    tape.div(a, deg)
}

/// Attention matrix of one GAT layer: `exp(leaky(a_src·Wh_i + a_dst·Wh_j))`
/// weighted by the adjacency entry and normalized per row.
pub fn gat_attention(tape: &mut Tape, support: Var, wh: Var, a_src: Var, a_dst: Var) -> Result<Var> {
    let n = tape.shape(wh).0;
    let src = tape.matmul(wh, a_src)?;
    let dst = tape.matmul(wh, a_dst)?;
    let src = tape.broadcast_to(src, (n, n))?;
    let dst = tape.transpose(dst);
    let e = tape.add(src, dst)?;
    let e = tape.leaky_relu(e, LEAKY_SLOPE);
    // subtracting a per-row constant leaves the normalized weights unchanged
    let row_max = tape
        .value(e)
        .rows()
        .into_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect::<Vec<_>>();
    let shift = tape.constant(Matrix::from_shape_vec((n, 1), row_max).expect("n rows"));
    let e = tape.sub(e, shift)?;
    let w = tape.exp(e);
    let w = tape.mul(w, support)?;
    let total = tape.row_sums(w);
    tape.div(w, total)
}

/// One draw of relay parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayModel {
    pub config: RelayConfig,
    pub weights: Vec<Matrix>,
}

impl RelayModel {
    /// Glorot-uniform weights, `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
    pub fn sample_theta(config: RelayConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = config
            .shapes()
            .into_iter()
            .map(|(r, c)| {
                let b = (6.0 / (r + c) as f64).sqrt();
                Matrix::from_shape_simple_fn((r, c), || rng.random_range(-b..b))
            })
            .collect();
        Self { config, weights }
    }

    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.weights.iter().map(|w| tape.param(w.clone())).collect()
    }

    pub fn forward(&self, adj: &Matrix, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let theta: Vec<Var> = self.weights.iter().map(|w| tape.constant(w.clone())).collect();
        let a = tape.constant(adj.clone());
        let xv = tape.constant(x.clone());
        let h = self.config.forward_on(&mut tape, &theta, a, xv)?;
        Ok(tape.value(h).clone())
    }
}

/// Fixed node features `N(0, 1/d)` for a graph without side information.
pub fn random_features(num_nodes: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
    Matrix::from_shape_simple_fn((num_nodes, dim), || dist.sample(&mut rng))
}

/// Positive and negative pair weights for the link-prediction loss
/// `(Σ P ⊙ softplus(-L) + Σ Q ⊙ softplus(L)) / norm` over user-item scores
/// `L = H_U H_I^T`.
#[derive(Debug, Clone)]
pub struct LinkTargets {
    pub num_users: usize,
    /// `N x M` negative weights.
    pub neg: Matrix,
    pub norm: f64,
}

/// Negative-sampling exponent applied to item degrees.
pub const NEG_EXPONENT: f64 = 0.75;

impl LinkTargets {
    /// Exact expectation of sampling `k_neg` negatives per edge from the
    /// degree^0.75 item distribution, normalized per edge.
    pub fn from_graph(graph: &BipartiteGraph, k_neg: usize) -> Result<Self> {
        let user_deg: Vec<f64> = graph.user_degrees().iter().map(|&d| d as f64).collect();
        let item_deg: Vec<f64> = graph.item_degrees().iter().map(|&d| d as f64).collect();
        Self::from_degrees(&user_deg, &item_deg, k_neg)
    }

    /// Same construction from (possibly fractional) degrees.
    pub fn from_degrees(user_deg: &[f64], item_deg: &[f64], k_neg: usize) -> Result<Self> {
        if k_neg == 0 {
            return Err(Error::invalid("LinkTargets", "k_neg must be at least 1"));
        }
        let norm: f64 = user_deg.iter().sum();
        if !(norm > 0.0) {
            return Err(Error::invalid("LinkTargets", "graph has no edges"));
        }
        let mass: Vec<f64> = item_deg.iter().map(|d| d.max(0.0).powf(NEG_EXPONENT)).collect();
        let total: f64 = mass.iter().sum();
        let neg = Matrix::from_shape_fn((user_deg.len(), item_deg.len()), |(u, i)| {
            k_neg as f64 * user_deg[u] * mass[i] / total
        });
        Ok(Self {
            num_users: user_deg.len(),
            neg,
            norm,
        })
    }

    /// Targets for a soft cross block `P` (users x items): degrees are its
    /// row and column sums.
    pub fn from_soft(pos: &Matrix, k_neg: usize) -> Result<Self> {
        let user_deg: Vec<f64> = pos.rows().into_iter().map(|r| r.sum()).collect();
        let item_deg: Vec<f64> = pos.columns().into_iter().map(|c| c.sum()).collect();
        Self::from_degrees(&user_deg, &item_deg, k_neg)
    }
}

/// Weighted link-prediction loss on `tape`. `pos` is the `N x M` positive
/// weight matrix, which may depend on trainable nodes.
pub fn relay_loss_on(tape: &mut Tape, h: Var, pos: Var, targets: &LinkTargets) -> Result<Var> {
    let nu = targets.num_users;
    let rows = tape.shape(h).0;
    let hu = tape.row_slice(h, 0, nu)?;
    let hi = tape.row_slice(h, nu, rows)?;
    let hit = tape.transpose(hi);
    let scores = tape.matmul(hu, hit)?;
    let neg_scores = tape.neg(scores);
    let pos_term = tape.softplus(neg_scores);
    let pos_term = tape.mul(pos, pos_term)?;
    let neg_term = tape.softplus(scores);
    let q = tape.constant(targets.neg.clone());
    let neg_term = tape.mul(q, neg_term)?;
    let total = tape.add(pos_term, neg_term)?;
    let total = tape.sum(total);
    Ok(tape.scale(total, 1.0 / targets.norm))
}

/// Where the negative weight of a link-prediction loss comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Negatives {
    /// `k` negatives per positive, drawn from the degree^0.75 item
    /// distribution, in expectation.
    Degree(usize),
    /// Every user-item pair is a negative with weight `1 - P`, so a 0/1 `P`
    /// uses all unobserved pairs.
    Complement,
    /// `k` negatives per positive, uniform over the user's unobserved items,
    /// in expectation.
    Unobserved(usize),
}

impl Default for Negatives {
    fn default() -> Self {
        Self::Complement
    }
}

impl fmt::Display for Negatives {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Degree(k) => write!(f, "degree:{k}"),
            Self::Complement => f.write_str("complement"),
            Self::Unobserved(k) => write!(f, "unobserved:{k}"),
        }
    }
}

impl FromStr for Negatives {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "complement" {
            return Ok(Self::Complement);
        }
        let (name, count) = s.split_once(':').unwrap_or((s.as_str(), "1"));
        let k = match count.parse::<usize>() {
            Ok(k) if k >= 1 => k,
            _ => return Err(Error::config("negatives", format!("bad negative count in `{s}`"))),
        };
        match name {
            "degree" => Ok(Self::Degree(k)),
            "unobserved" => Ok(Self::Unobserved(k)),
            _ => Err(Error::config(
                "negatives",
                format!("unknown scheme `{s}` (complement, degree:K or unobserved:K)"),
            )),
        }
    }
}

/// Weighted link-prediction loss where the negative weights are derived on
/// the tape from `pos` itself: user degrees are row sums, the negative item
/// distribution is proportional to column sums raised to 0.75, and the loss
/// is normalized by the total positive weight. With a 0/1 `pos` this is the
/// expectation form of [`LinkTargets::from_graph`].
pub fn relay_loss_soft_on(tape: &mut Tape, h: Var, pos: Var, k_neg: usize) -> Result<Var> {
    relay_loss_weighted_on(tape, h, pos, Negatives::Degree(k_neg))
}

/// `(Σ P ⊙ softplus(-L) + Σ Q ⊙ softplus(L)) / max(Σ P, 1)` with `Q` derived
/// from `pos` on the tape according to `negatives`. The complement scheme
/// weighs every user-item pair once and divides by the pair count instead.
pub fn relay_loss_weighted_on(tape: &mut Tape, h: Var, pos: Var, negatives: Negatives) -> Result<Var> {
    let (nu, ni) = tape.shape(pos);
    let rows = tape.shape(h).0;
    let neg = match negatives {
        Negatives::Degree(0) | Negatives::Unobserved(0) => {
            return Err(Error::invalid("relay_loss", "k_neg must be at least 1"));
        }
        Negatives::Degree(k_neg) => {
            let user_deg = tape.row_sums(pos);
            let item_deg = tape.col_sums(pos);
            // keeps the 0.75 power differentiable at zero-degree items
            let item_deg = tape.shift(item_deg, 1e-12);
            let log_deg = tape.log(item_deg);
            let log_mass = tape.scale(log_deg, NEG_EXPONENT);
            let mass = tape.exp(log_mass);
            let mass_total = tape.sum(mass);
            let dist = tape.div(mass, mass_total)?;
            let neg = tape.matmul(user_deg, dist)?;
            tape.scale(neg, k_neg as f64)
        }
        Negatives::Complement => {
            let flipped = tape.neg(pos);
            let ones = tape.shift(flipped, 1.0);
            debug_assert_eq!(tape.shape(ones), (nu, ni));
            ones
        }
        Negatives::Unobserved(k_neg) => {
            let flipped = tape.neg(pos);
            let unobserved = tape.shift(flipped, 1.0);
            let user_deg = tape.row_sums(pos);
            let room = tape.row_sums(unobserved);
            let room = tape.shift(room, 1e-12);
            let per_pair = tape.div(user_deg, room)?;
            let neg = tape.mul(unobserved, per_pair)?;
            tape.scale(neg, k_neg as f64)
        }
    };

    let hu = tape.row_slice(h, 0, nu)?;
    let hi = tape.row_slice(h, nu, rows)?;
    let hit = tape.transpose(hi);
    let scores = tape.matmul(hu, hit)?;
    let flipped = tape.neg(scores);
    let pos_term = tape.softplus(flipped);
    let pos_term = tape.mul(pos, pos_term)?;
    let neg_term = tape.softplus(scores);
    let neg_term = tape.mul(neg, neg_term)?;
    let total = tape.add(pos_term, neg_term)?;
    let total = tape.sum(total);
    if negatives == Negatives::Complement {
        // every pair carries unit weight, so this is a plain mean
        return Ok(tape.scale(total, 1.0 / (nu * ni) as f64));
    }
    let norm = tape.sum(pos);
    // a soft graph with less than one positive's worth of weight would
    // otherwise blow the loss (and the inner relay steps) up
    let norm = if tape.scalar(norm) < 1.0 { tape.scalar_constant(1.0) } else { norm };
    tape.div(total, norm)
}

/// Explicit mini-batch form: `-(1/|B|) Σ [ln σ(h_u·h_i) + Σ_k ln(1 - σ(h_u·h_n))]`.
/// `negatives[b]` holds the sampled items for `batch[b]`.
pub fn relay_loss_sampled(
    tape: &mut Tape,
    h: Var,
    num_users: usize,
    batch: &[(usize, usize)],
    negatives: &[Vec<usize>],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("relay_loss_sampled", "empty batch"));
    }
    if negatives.len() != batch.len() {
        return Err(Error::invalid("relay_loss_sampled", "one negative list per edge"));
    }
    let users: Vec<usize> = batch.iter().map(|e| e.0).collect();
    let items: Vec<usize> = batch.iter().map(|e| num_users + e.1).collect();
    let hu = tape.gather_rows(h, &users)?;
    let hi = tape.gather_rows(h, &items)?;
    let prod = tape.mul(hu, hi)?;
    let dots = tape.row_sums(prod);
    let neg = tape.neg(dots);
    let pos = tape.softplus(neg);
    let mut total = tape.sum(pos);
    let k = negatives[0].len();
    for j in 0..k {
        let idx: Vec<usize> = negatives
            .iter()
            .map(|n| n.get(j).map(|&i| num_users + i))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::invalid("relay_loss_sampled", "ragged negative lists"))?;
        let hn = tape.gather_rows(h, &idx)?;
        let prod = tape.mul(hu, hn)?;
        let dots = tape.row_sums(prod);
        let term = tape.softplus(dots);
        let term = tape.sum(term);
        total = tape.add(total, term)?;
    }
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

/// Plain value of the weighted loss, for reporting.
pub fn relay_loss_value(h: &Matrix, pos: &Matrix, targets: &LinkTargets) -> f64 {
    let nu = targets.num_users;
    let scores = h.slice(s![..nu, ..]).dot(&h.slice(s![nu.., ..]).t());
    let mut total = 0.0;
    for ((idx, &l), &p) in scores.indexed_iter().zip(pos.iter()) {
        total += p * softplus(-l) + targets.neg[idx] * softplus(l);
    }
    total / targets.norm
}

/// Trains `model` on the original graph by full-batch gradient descent and
/// returns the loss before every step.
pub fn train_relay(
    model: &mut RelayModel,
    graph: &BipartiteGraph,
    features: &Matrix,
    k_neg: usize,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let targets = LinkTargets::from_graph(graph, k_neg)?;
    let adj = graph.dense_adjacency();
    let pos = graph.biadjacency();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let theta = model.register(&mut tape);
        let a = tape.constant(adj.clone());
        let x = tape.constant(features.clone());
        let p = tape.constant(pos.clone());
        let h = model.config.forward_on(&mut tape, &theta, a, x)?;
        let loss = relay_loss_on(&mut tape, h, p, &targets)?;
        losses.push(tape.scalar(loss));
        let grads = tape.grad(loss, &theta)?;
        crate::autodiff::optim::sgd_step(&mut model.weights, &grads, lr);
    }
    Ok(losses)
}
