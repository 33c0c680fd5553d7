//! Top-K ranking metrics and per-epoch timing probes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn hits<'a>(ranked: &'a [usize], relevant: &'a [usize], k: usize) -> impl Iterator<Item = (usize, bool)> + 'a {
    ranked.iter().take(k).enumerate().map(move |(r, i)| (r, relevant.binary_search(i).is_ok()))
}

fn hit_count(ranked: &[usize], relevant: &[usize], k: usize) -> usize {
    hits(ranked, relevant, k).filter(|(_, h)| *h).count()
}

/// `|top-K ∩ relevant| / K`. `relevant` must be sorted ascending.
pub fn precision_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    assert!(k >= 1, "K must be at least 1");
    hit_count(ranked, relevant, k) as f64 / k as f64
}

/// `|top-K ∩ relevant| / |relevant|`, or `None` when nothing is relevant.
pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    assert!(k >= 1, "K must be at least 1");
    (!relevant.is_empty()).then(|| hit_count(ranked, relevant, k) as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG with the ideal list truncated at
/// `min(K, |relevant|)`. Zero when nothing is relevant.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    assert!(k >= 1, "K must be at least 1");
    let discount = |r: usize| 1.0 / ((r + 2) as f64).log2();
    let dcg: f64 = hits(ranked, relevant, k).filter(|(_, h)| *h).map(|(r, _)| discount(r)).sum();
    let idcg: f64 = (0..k.min(relevant.len())).map(discount).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Metrics of one run, averaged over users with a nonempty test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub users_evaluated: usize,
}

/// `ranked[u]` is user u's list and `test[u]` its sorted held-out items.
pub fn evaluate(ranked: &[Vec<usize>], test: &[Vec<usize>], k: usize) -> Result<RunMetrics> {
    if ranked.len() != test.len() {
        return Err(Error::invalid("evaluate", format!("{} ranked lists for {} users", ranked.len(), test.len())));
    }
    if k == 0 {
        return Err(Error::invalid("evaluate", "K must be at least 1"));
    }
    let (mut p, mut r, mut n, mut users) = (0.0, 0.0, 0.0, 0usize);
    for (list, rel) in ranked.iter().zip(test) {
        let Some(rec) = recall_at_k(list, rel, k) else { continue };
        p += precision_at_k(list, rel, k);
        r += rec;
        n += ndcg_at_k(list, rel, k);
        users += 1;
    }
    let d = users.max(1) as f64;
    Ok(RunMetrics {
        precision: p / d,
        recall: r / d,
        ndcg: n / d,
        users_evaluated: users,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Per-seed metrics with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub precision_k: f64,
    pub recall_k: f64,
    pub ndcg_k: f64,
    pub std: Spread,
    /// Set when only one run was aggregated; `std` is then zero.
    pub single_run: bool,
    pub users_evaluated: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<RunMetrics>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn aggregate(k: usize, seeds: Vec<u64>, per_seed: Vec<RunMetrics>) -> Result<Self> {
        if per_seed.is_empty() || seeds.len() != per_seed.len() {
            return Err(Error::invalid("MetricsReport::aggregate", "need one nonempty metrics entry per seed"));
        }
        let (p, sp) = mean_std(per_seed.iter().map(|m| m.precision));
        let (r, sr) = mean_std(per_seed.iter().map(|m| m.recall));
        let (n, sn) = mean_std(per_seed.iter().map(|m| m.ndcg));
        Ok(Self {
            k,
            precision_k: p,
            recall_k: r,
            ndcg_k: n,
            std: Spread {
                precision: sp,
                recall: sr,
                ndcg: sn,
            },
            single_run: per_seed.len() == 1,
            users_evaluated: per_seed[0].users_evaluated,
            seeds,
            per_seed,
        })
    }

    pub fn csv_header(&self) -> String {
        let k = self.k;
        format!("run,P@{k},N@{k},R@{k},Std_P,Std_N,Std_R")
    }

    pub fn csv_row(&self, run: &str) -> String {
        format!(
            "{run},{},{},{},{},{},{}",
            self.precision_k, self.ndcg_k, self.recall_k, self.std.precision, self.std.ndcg, self.std.recall
        )
    }

    pub fn to_csv(&self, run: &str) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row(run))
    }
}

/// Stage-two cost of one training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    /// Median wall time of the measured epochs.
    pub epoch_time_seconds: f64,
    pub epoch_times: Vec<f64>,
    pub peak_bytes_estimate: usize,
    pub edges_original: usize,
    pub edges_condensed: usize,
}

impl EfficiencyReport {
    pub fn edge_ratio(&self) -> f64 {
        self.edges_condensed as f64 / self.edges_original as f64
    }
}

/// Analytic memory of BPR training: embeddings plus the adjacency lists,
/// each edge stored once per direction.
pub fn bpr_memory_bytes(users: usize, items: usize, dim: usize, edges: usize) -> usize {
    let f = std::mem::size_of::<f64>();
    let idx = std::mem::size_of::<usize>();
    (users + items) * dim * f + 2 * edges * idx + (users + items) * 3 * idx
}

/// Runs `epoch` `warmup + measured` times and returns the median wall time of
/// the measured calls together with all of them.
pub fn time_epochs(warmup: usize, measured: usize, mut epoch: impl FnMut() -> Result<()>) -> Result<(f64, Vec<f64>)> {
    if measured < 5 {
        return Err(Error::invalid("efficiency_probe", "need at least 5 measured epochs"));
    }
    for _ in 0..warmup {
        epoch()?;
    }
    let mut times = Vec::with_capacity(measured);
    for _ in 0..measured {
        let start = Instant::now();
        epoch()?;
        times.push(start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
    }
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
    Ok((median, times))
}
