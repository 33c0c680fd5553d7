//! The condensed graph: embedding tables for representative users and items,
//! the interaction transform that generates soft adjacency between them, and
//! the penalties that keep that adjacency bipartite.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{concatenate, s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Entries `N(0, 1/d)`, transform `I + N(0, 0.01²)`.
    Gaussian,
    /// All zeros, so every soft entry is 0.5. For debugging.
    Zeros,
}

/// Which node pairs the interaction function scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PairScope {
    /// Every ordered pair except the diagonal, so user-user and item-item
    /// entries exist and can be penalized.
    #[default]
    AllPairs,
    /// Only user-item pairs; intra-group entries are fixed at zero.
    CrossOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedGraph {
    /// `N' x d`
    pub user_emb: Matrix,
    /// `M' x d`
    pub item_emb: Matrix,
    /// `d x d`
    pub transform: Matrix,
    pub tau: f64,
}

/// Number of condensed nodes kept from `n` at ratio `alpha`.
pub fn condensed_size(n: usize, alpha: f64) -> usize {
    // guard against 0.8 * 100 = 80.00000000000001
    let x = alpha * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).max(1)
}

impl CondensedGraph {
    pub fn new(user_emb: Matrix, item_emb: Matrix, transform: Matrix, tau: f64) -> Result<Self> {
        let cg = Self {
            user_emb,
            item_emb,
            transform,
            tau,
        };
        cg.validate()?;
        Ok(cg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.user_emb.ncols();
        if self.user_emb.nrows() == 0 || self.item_emb.nrows() == 0 || d == 0 {
            return Err(Error::invalid("CondensedGraph", "needs at least one user, one item and d >= 1"));
        }
        if self.item_emb.ncols() != d || self.transform.dim() != (d, d) {
            return Err(Error::Shape {
                op: "CondensedGraph",
                lhs: self.item_emb.dim(),
                rhs: self.transform.dim(),
            });
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid("CondensedGraph", format!("tau {} outside (0, 1)", self.tau)));
        }
        if !self.is_finite() {
            return Err(Error::invalid("CondensedGraph", "non-finite entry"));
        }
        Ok(())
    }

    pub fn init(num_users: usize, num_items: usize, dim: usize, tau: f64, seed: u64, scheme: InitScheme) -> Result<Self> {
        if num_users == 0 || num_items == 0 || dim == 0 {
            return Err(Error::invalid("CondensedGraph::init", "sizes must be at least 1"));
        }
        let cg = match scheme {
            InitScheme::Zeros => Self {
                user_emb: Matrix::zeros((num_users, dim)),
                item_emb: Matrix::zeros((num_items, dim)),
                transform: Matrix::zeros((dim, dim)),
                tau,
            },
            InitScheme::Gaussian => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let emb = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
                let noise = Normal::new(0.0, 0.01).expect("positive std");
                let user_emb = Matrix::from_shape_simple_fn((num_users, dim), || emb.sample(&mut rng));
                let item_emb = Matrix::from_shape_simple_fn((num_items, dim), || emb.sample(&mut rng));
                let mut transform = Matrix::from_shape_simple_fn((dim, dim), || noise.sample(&mut rng));
                transform.diag_mut().mapv_inplace(|x| x + 1.0);
                Self {
                    user_emb,
                    item_emb,
                    transform,
                    tau,
                }
            }
        };
        cg.validate()?;
        Ok(cg)
    }

    /// A condensed graph that reproduces `graph` exactly: the embeddings are
    /// the original node features and the transform is solved so that every
    /// edge scores `+margin` and every other pair `-margin`. Needs
    /// `d >= N + M` and linearly independent feature rows.
    pub fn copy_of(graph: &BipartiteGraph, features: &Matrix, margin: f64, tau: f64) -> Result<Self> {
        let n = graph.num_nodes();
        if features.nrows() != n {
            return Err(Error::Shape {
                op: "CondensedGraph::copy_of",
                lhs: features.dim(),
                rhs: (n, n),
            });
        }
        let d = features.ncols();
        if d < n {
            return Err(Error::invalid("CondensedGraph::copy_of", format!("dimension {d} below node count {n}")));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[[i, j]]);
        let gram = &x * x.transpose();
        let inv = gram
            .cholesky()
            .ok_or_else(|| Error::invalid("CondensedGraph::copy_of", "feature rows are linearly dependent"))?
            .inverse();
        let pinv = x.transpose() * inv; // d x n, X pinv = I
        let a = graph.dense_adjacency();
        let target = DMatrix::from_fn(n, n, |i, j| margin * (2.0 * a[[i, j]] - 1.0));
        let w = &pinv * target * pinv.transpose();
        let transform = Matrix::from_shape_fn((d, d), |(i, j)| w[(i, j)]);
        let nu = graph.num_users();
        Self::new(
            features.slice(s![..nu, ..]).to_owned(),
            features.slice(s![nu.., ..]).to_owned(),
            transform,
            tau,
        )
    }

    pub fn num_users(&self) -> usize {
        self.user_emb.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item_emb.nrows()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users() + self.num_items()
    }

    pub fn dim(&self) -> usize {
        self.user_emb.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb
            .iter()
            .chain(self.item_emb.iter())
            .chain(self.transform.iter())
            .all(|x| x.is_finite())
    }

    /// `[E_U; E_I]`, the stacked node features of the condensed graph.
    pub fn features(&self) -> Matrix {
        concatenate(Axis(0), &[self.user_emb.view(), self.item_emb.view()]).expect("same width")
    }

    pub fn masks(&self) -> BipartiteMasks {
        BipartiteMasks::new(self.num_users(), self.num_items())
    }

    /// Raw scores `z_i^T W z_j`.
    pub fn logits(&self) -> Matrix {
        let z = self.features();
        z.dot(&self.transform).dot(&z.t())
    }

    pub fn soft_adjacency(&self, scope: PairScope) -> Matrix {
        let mask = scope_mask(self.num_users(), self.num_items(), scope);
        self.logits().mapv(sigmoid) * mask
    }

    pub fn hard_adjacency(&self, scope: PairScope) -> Matrix {
        hard_adjacency(&self.soft_adjacency(scope), self.tau)
    }

    /// Cross-group edges of the hard adjacency as (user, item) pairs.
    pub fn hard_edges(&self, scope: PairScope) -> Vec<(usize, usize)> {
        let a = self.hard_adjacency(scope);
        let nu = self.num_users();
        let mut edges = Vec::new();
        for u in 0..nu {
            for i in 0..self.num_items() {
                if a[[u, nu + i]] > 0.0 {
                    edges.push((u, i));
                }
            }
        }
        edges
    }

    /// The cross-group part of the hard adjacency as a bipartite graph.
    pub fn to_bipartite(&self, scope: PairScope) -> BipartiteGraph {
        BipartiteGraph::from_edges(self.num_users(), self.num_items(), self.hard_edges(scope))
            .expect("indices in range")
    }

    /// Number of user-user plus item-item edges in the hard adjacency,
    /// counting each unordered pair once.
    pub fn intra_edge_count(&self, scope: PairScope) -> usize {
        let a = self.hard_adjacency(scope);
        let masks = self.masks();
        let n = (&a * &(&masks.user + &masks.item)).sum();
        (n / 2.0).round() as usize
    }

    /// Writes the graph to `dir`: tab-separated matrices, the cross-group
    /// edge list in the interaction-log format, and `meta.json`.
    pub fn export(&self, dir: impl AsRef<Path>, meta: &ExportMeta, scope: PairScope) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_matrix(&dir.join("embeddings_users.tsv"), &self.user_emb)?;
        write_matrix(&dir.join("embeddings_items.tsv"), &self.item_emb)?;
        write_matrix(&dir.join("transform.tsv"), &self.transform)?;
        let edges = self.hard_edges(scope);
        let mut text = String::new();
        for (u, i) in &edges {
            text.push_str(&format!("u{u}\ti{i}\n"));
        }
        let path = dir.join("adjacency_edgelist.tsv");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let full = ExportedMeta {
            num_users: self.num_users(),
            num_items: self.num_items(),
            dim: self.dim(),
            tau: self.tau,
            lambda: meta.lambda,
            beta: meta.beta,
            seed: meta.seed,
            cross_edges: edges.len(),
            intra_edges: self.intra_edge_count(scope),
        };
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_string_pretty(&full)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Reads back a directory written by [`CondensedGraph::export`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ExportedMeta = serde_json::from_str(&text)?;
        Self::new(
            read_matrix(&dir.join("embeddings_users.tsv"))?,
            read_matrix(&dir.join("embeddings_items.tsv"))?,
            read_matrix(&dir.join("transform.tsv"))?,
            meta.tau,
        )
    }
}

/// Run settings recorded next to an exported graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExportMeta {
    pub lambda: f64,
    pub beta: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExportedMeta {
    num_users: usize,
    num_items: usize,
    dim: usize,
    tau: f64,
    lambda: f64,
    beta: f64,
    seed: u64,
    cross_edges: usize,
    intra_edges: usize,
}

fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = Vec::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
        writeln!(out, "{}", line.join("\t")).expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_matrix(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (n, line) in text.lines().enumerate() {
        let fail = |reason: String| Error::Parse {
            path: path.display().to_string(),
            line: n + 1,
            reason,
        };
        let row: Vec<f64> = line
            .split('\t')
            .map(|x| x.parse::<f64>().map_err(|e| fail(e.to_string())))
            .collect::<Result<_>>()?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(fail("ragged row".into()));
        }
        data.extend(row);
        rows += 1;
    }
    Matrix::from_shape_vec((rows, cols.unwrap_or(0)), data).map_err(|e| Error::invalid("read_matrix", e.to_string()))
}

/// 0/1 mask of the entries a scope scores.
pub fn scope_mask(num_users: usize, num_items: usize, scope: PairScope) -> Matrix {
    let n = num_users + num_items;
    match scope {
        PairScope::AllPairs => Matrix::from_shape_fn((n, n), |(i, j)| f64::from(u8::from(i != j))),
        PairScope::CrossOnly => BipartiteMasks::new(num_users, num_items).cross(),
    }
}

/// `S = sigmoid(Z W Z^T)` masked to `scope`, recorded on `tape`.
pub fn soft_adjacency_on(
    tape: &mut Tape,
    user_emb: Var,
    item_emb: Var,
    transform: Var,
    scope: PairScope,
) -> Result<Var> {
    let (nu, ni) = (tape.shape(user_emb).0, tape.shape(item_emb).0);
    let z = tape.concat_rows(user_emb, item_emb)?;
    let zw = tape.matmul(z, transform)?;
    let zt = tape.transpose(z);
    let logits = tape.matmul(zw, zt)?;
    let s = tape.sigmoid(logits);
    let mask = tape.constant(scope_mask(nu, ni, scope));
    tape.mul(s, mask)
}

/// Hard values in the forward pass, gradients of the soft values backward.
pub fn straight_through(tape: &mut Tape, soft: Var, tau: f64) -> Result<Var> {
    let s = tape.value(soft);
    let offset = hard_adjacency(s, tau) - s;
    let offset = tape.constant(offset);
    tape.add(soft, offset)
}

/// `A'_ij = 1` iff `S_ij >= tau`, symmetrized by OR.
pub fn hard_adjacency(s: &Matrix, tau: f64) -> Matrix {
    let n = s.nrows();
    Matrix::from_shape_fn((n, n), |(i, j)| {
        f64::from(u8::from(i != j && (s[[i, j]] >= tau || s[[j, i]] >= tau)))
    })
}

/// Block masks over the stacked `[users; items]` index space. Each mask
/// includes its block's diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteMasks {
    pub num_users: usize,
    pub num_items: usize,
    pub user: Matrix,
    pub item: Matrix,
}

impl BipartiteMasks {
    pub fn new(num_users: usize, num_items: usize) -> Self {
        let n = num_users + num_items;
        let user = Matrix::from_shape_fn((n, n), |(i, j)| f64::from(u8::from(i < num_users && j < num_users)));
        let item = Matrix::from_shape_fn((n, n), |(i, j)| f64::from(u8::from(i >= num_users && j >= num_users)));
        Self {
            num_users,
            num_items,
            user,
            item,
        }
    }

    pub fn cross(&self) -> Matrix {
        (&self.user + &self.item).mapv(|x| 1.0 - x)
    }

    pub fn intra(&self) -> Matrix {
        &self.user + &self.item
    }
}

/// `lambda (||S ⊙ M_U||² + ||S ⊙ M_I||²)` on the tape.
pub fn bsl_on(tape: &mut Tape, s: Var, lambda: f64, masks: &BipartiteMasks) -> Result<Var> {
    let mu = tape.constant(masks.user.clone());
    let mi = tape.constant(masks.item.clone());
    let su = tape.mul(s, mu)?;
    let si = tape.mul(s, mi)?;
    let fu = tape.frobenius_sq(su);
    let fi = tape.frobenius_sq(si);
    let total = tape.add(fu, fi)?;
    Ok(tape.scale(total, lambda))
}

pub fn bsl(s: &Matrix, lambda: f64, masks: &BipartiteMasks) -> f64 {
    let intra = masks.intra();
    lambda * s.iter().zip(intra.iter()).map(|(x, m)| m * x * x).sum::<f64>()
}

/// `dL/dS = 2 lambda S ⊙ (M_U + M_I)`.
pub fn bsl_grad_analytic(s: &Matrix, lambda: f64, masks: &BipartiteMasks) -> Matrix {
    s * &masks.intra() * (2.0 * lambda)
}

/// Smoothness form: `lambda (tr(X_U^T L_U X_U) + tr(X_I^T L_I X_I))` where
/// each Laplacian is built from the symmetrized intra-group block of `S`.
pub fn bsl_laplacian(s: &Matrix, features: &Matrix, lambda: f64, masks: &BipartiteMasks) -> f64 {
    let nu = masks.num_users;
    let block = |lo: usize, hi: usize| {
        let a = s.slice(s![lo..hi, lo..hi]);
        let a = (&a + &a.t()) * 0.5;
        let x = features.slice(s![lo..hi, ..]);
        let deg = a.sum_axis(Axis(1));
        let lap = Matrix::from_diag(&deg) - &a;
        let xtlx = x.t().dot(&lap).dot(&x);
        xtlx.diag().sum()
    };
    lambda * (block(0, nu) + block(nu, s.nrows()))
}

/// Largest intra-group soft entry and total intra-group soft mass, ignoring
/// the diagonal.
pub fn intra_mass(s: &Matrix, masks: &BipartiteMasks) -> (f64, f64) {
    let intra = masks.intra();
    let mut max = 0.0f64;
    let mut total = 0.0;
    for ((i, j), &x) in s.indexed_iter() {
        if i != j && intra[[i, j]] > 0.0 {
            max = max.max(x);
            total += x;
        }
    }
    (max, total)
}
