use serde::{Deserialize, Serialize};

use super::config::{Baseline, EvalMode, ExperimentConfig, Init};
use crate::autodiff::Matrix;
use crate::condense::{condense_with, initial_graph, CondensationConfig, CondensedInit, MatchReport, OriginalSide};
use crate::condensed::{intra_mass, CondensedGraph, InitScheme, PairScope};
use crate::error::{Error, Result};
use crate::eval::{bpr_memory_bytes, evaluate, time_epochs, EfficiencyReport, RunMetrics};
use crate::graph::synthetic::BlockModel;
use crate::graph::{
    k_core_filter, load_interactions_as, sample_subgraph_degree, sample_subgraph_random, split, BipartiteGraph, GraphStats,
    InteractionLog, SampledGraph, SplitDataset,
};
use crate::recommend::{
    assign_representatives, bpr_train, recommend_for_original, Assignment, BprConfig, BprTrainer, RecModel, TopK, TrainedOn,
};
use crate::relay::{random_features, train_relay, RelayConfig, RelayModel};

/// Counts before and after k-core filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub source: String,
    pub raw: GraphStats,
    pub filtered: GraphStats,
}

/// Raw log of the configured data file or the built-in block model.
pub fn raw_log(cfg: &ExperimentConfig) -> Result<(InteractionLog, String)> {
    match &cfg.data {
        Some(path) => Ok((load_interactions_as(path, cfg.format)?, path.display().to_string())),
        None => {
            let s = &cfg.synthetic;
            let log = BlockModel::new(s.users, s.items, s.blocks, s.p_in, s.p_out).generate(s.seed)?;
            Ok((log, format!("synthetic:{}x{}:{}blocks:seed{}", s.users, s.items, s.blocks, s.seed)))
        }
    }
}

/// Filtered log and its train/test split for `seed`.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<(InteractionLog, SplitDataset, DatasetInfo)> {
    let (raw, source) = raw_log(cfg)?;
    let filtered = k_core_filter(&raw, cfg.k_core)?;
    let data = split(&filtered, cfg.split_ratio, seed)?;
    let info = DatasetInfo {
        source,
        raw: raw.stats(),
        filtered: filtered.stats(),
    };
    Ok((filtered, data, info))
}

pub fn bpr_config(cfg: &ExperimentConfig, seed: u64) -> BprConfig {
    let mut b = BprConfig::new(cfg.dim, cfg.epochs_rec, seed);
    b.lr = cfg.lr;
    b.reg = cfg.reg;
    b
}

pub fn relay_config(cfg: &ExperimentConfig) -> Result<RelayConfig> {
    RelayConfig::new(cfg.backbone, cfg.layers, cfg.dim, cfg.dim)
}

pub fn condensation_config(cfg: &ExperimentConfig, seed: u64) -> Result<CondensationConfig> {
    let mut c = CondensationConfig::new(cfg.dim, relay_config(cfg)?);
    c.alpha = cfg.alpha;
    c.lambda = if cfg.bsl { cfg.lambda } else { 0.0 };
    c.beta = cfg.beta;
    c.tau = cfg.tau;
    c.strategy = cfg.matching;
    c.distance = cfg.distance;
    c.inner_steps = cfg.inner_steps;
    c.theta_samples = cfg.theta_samples;
    c.view.negatives = cfg.negatives;
    c.view.straight_through = cfg.straight_through;
    if cfg.cross_only { c.view.scope = PairScope::CrossOnly; }
    c.outer_epochs = cfg.epochs_condense;
    c.lr_outer = cfg.lr_condense;
    c.lr_inner = cfg.lr_inner;
    c.seed = seed;
    c.init = match cfg.init {
        Init::Random => CondensedInit::Random(InitScheme::Gaussian),
        Init::Copy => CondensedInit::Copy,
    };
    Ok(c)
}

/// Fixed node features of the training graph for `seed`.
pub fn node_features(cfg: &ExperimentConfig, graph: &BipartiteGraph, seed: u64) -> Matrix {
    random_features(graph.num_nodes(), cfg.dim, seed ^ 0xfea7)
}

/// What one seed of a condensed run produced besides its metrics.
#[derive(Debug, Clone)]
pub struct CondensedArtifacts {
    pub graph: CondensedGraph,
    pub report: MatchReport,
    /// Export graph handed to the recommender.
    pub bipartite: BipartiteGraph,
    pub intra_edges: usize,
    pub final_intra_mass: f64,
    pub assignment: Option<Assignment>,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: RunMetrics,
    pub model: RecModel,
    /// Edges the recommender was trained on.
    pub train_edges: usize,
    pub condensed: Option<CondensedArtifacts>,
    /// One list per original user, in the ids of the filtered log.
    pub ranked: Vec<TopK>,
}

fn rank_with_model(model: &RecModel, train: &BipartiteGraph, k: usize) -> Result<Vec<TopK>> {
    (0..train.num_users()).map(|u| model.top_k(u, k, train.user_items(u))).collect()
}

fn score(ranked: &[TopK], test: &[Vec<usize>], k: usize) -> Result<RunMetrics> {
    let lists: Vec<Vec<usize>> = ranked.iter().map(|t| t.items.clone()).collect();
    evaluate(&lists, test, k)
}

/// BPR on the whole training graph.
pub fn run_full(cfg: &ExperimentConfig, data: &SplitDataset, seed: u64) -> Result<SeedRun> {
    let model = bpr_train(&data.train, &bpr_config(cfg, seed), TrainedOn::Original)?;
    let ranked = rank_with_model(&model, &data.train, cfg.k)?;
    Ok(SeedRun {
        seed,
        metrics: score(&ranked, &data.test, cfg.k)?,
        model,
        train_edges: data.train.num_edges(),
        condensed: None,
        ranked,
    })
}

/// BPR on a sampled subgraph keeping a fraction `alpha` of users and items.
/// Users outside the sample get an empty list; items outside it are never
/// recommended.
pub fn run_sampled(cfg: &ExperimentConfig, data: &SplitDataset, kind: Baseline, seed: u64) -> Result<SeedRun> {
    let sampled: SampledGraph = match kind {
        Baseline::Ransam => sample_subgraph_random(&data.train, cfg.alpha, seed)?,
        Baseline::Majsam => sample_subgraph_degree(&data.train, cfg.alpha)?,
        Baseline::Full => return run_full(cfg, data, seed),
    };
    let model = bpr_train(&sampled.graph, &bpr_config(cfg, seed), TrainedOn::Sampled)?;
    let user_lookup = sampled.user_lookup(data.train.num_users());
    let item_lookup = sampled.item_lookup(data.train.num_items());
    let mut ranked = Vec::with_capacity(data.train.num_users());
    for u in 0..data.train.num_users() {
        let Some(su) = user_lookup[u] else {
            ranked.push(TopK { items: Vec::new(), scores: Vec::new(), short: true });
            continue;
        };
        let mut exclude: Vec<usize> = data.train.user_items(u).iter().filter_map(|&i| item_lookup[i]).collect();
        exclude.sort_unstable();
        let mut top = model.top_k(su, cfg.k, &exclude)?;
        top.items.iter_mut().for_each(|i| *i = sampled.items[*i]);
        ranked.push(top);
    }
    Ok(SeedRun {
        seed,
        metrics: score(&ranked, &data.test, cfg.k)?,
        model,
        train_edges: sampled.graph.num_edges(),
        condensed: None,
        ranked,
    })
}

/// Relay embeddings of the training graph after fitting the relay on it.
pub fn trained_relay(cfg: &ExperimentConfig, original: &OriginalSide, seed: u64) -> Result<RelayModel> {
    let mut relay = RelayModel::sample_theta(relay_config(cfg)?, seed ^ 0x7e1a);
    train_relay(&mut relay, &original.graph, &original.features, 1, cfg.relay_steps, cfg.relay_lr)?;
    Ok(relay)
}

/// Stage One output for one seed, before any recommender is trained.
#[derive(Debug, Clone)]
pub struct Condensation {
    pub graph: CondensedGraph,
    pub report: MatchReport,
    pub original: OriginalSide,
    /// Recommender embeddings carried over from interleaved mode.
    warm: Option<(Matrix, Matrix)>,
}

impl Condensation {
    pub fn intra_edges(&self) -> usize {
        self.graph.intra_edge_count(PairScope::AllPairs)
    }

    pub fn cross_edges(&self) -> usize {
        self.graph.hard_edges(PairScope::AllPairs).len()
    }

    pub fn final_intra_mass(&self) -> f64 {
        intra_mass(&self.graph.soft_adjacency(PairScope::AllPairs), &self.graph.masks()).1
    }
}

/// Runs Stage One on the training graph of `data`.
pub fn condense_seed(cfg: &ExperimentConfig, data: &SplitDataset, seed: u64) -> Result<Condensation> {
    let features = node_features(cfg, &data.train, seed);
    let original = OriginalSide::new(data.train.clone(), features)?;
    let ccfg = condensation_config(cfg, seed)?;
    let start = initial_graph(&ccfg, &original)?;
    let bpr = bpr_config(cfg, seed);

    // Interleaved mode runs one recommender epoch after every condensation
    // epoch, warm-starting from the previous embeddings.
    let mut warm: Option<(Matrix, Matrix)> = None;
    let mut interleave = |epoch: usize, cg: &CondensedGraph| -> Result<()> {
        if !cfg.interleaved {
            return Ok(());
        }
        let g = cg.to_bipartite(PairScope::AllPairs);
        if g.num_edges() == 0 {
            return Ok(());
        }
        let (u, i) = match warm.take() {
            Some(w) => w,
            None => {
                let m = bpr_train(&g, &BprConfig { epochs: 0, ..bpr.clone() }, TrainedOn::Condensed)?;
                (m.user_emb, m.item_emb)
            }
        };
        let mut t = BprTrainer::new(g, &BprConfig { seed: bpr.seed.wrapping_add(epoch as u64), ..bpr.clone() }, u, i)?;
        t.epoch()?;
        let (u, i) = t.embeddings();
        warm = Some((u.clone(), i.clone()));
        Ok(())
    };
    let (graph, report) = condense_with(&ccfg, &original, start, &mut interleave)?;
    Ok(Condensation {
        graph,
        report,
        original,
        warm,
    })
}

/// Condense, train BPR on the condensed graph, evaluate.
pub fn run_condensed(cfg: &ExperimentConfig, data: &SplitDataset, seed: u64) -> Result<SeedRun> {
    recommend_condensed(cfg, data, condense_seed(cfg, data, seed)?, seed)
}

/// Stage Two on a finished condensation, then evaluation.
pub fn recommend_condensed(cfg: &ExperimentConfig, data: &SplitDataset, c: Condensation, seed: u64) -> Result<SeedRun> {
    let Condensation {
        graph: cg,
        report,
        original,
        warm,
    } = c;
    let bpr = bpr_config(cfg, seed);
    let bipartite = cg.to_bipartite(PairScope::AllPairs);
    if bipartite.num_edges() == 0 {
        return Err(Error::EmptyCondensed { tau: cg.tau });
    }
    if bipartite.num_edges() == bipartite.num_users() * bipartite.num_items() {
        return Err(Error::SaturatedCondensed { tau: cg.tau });
    }
    let model = match warm {
        Some((u, i)) => crate::recommend::bpr_train_from(&bipartite, &bpr, TrainedOn::Condensed, u, i)?,
        None => bpr_train(&bipartite, &bpr, TrainedOn::Condensed)?,
    };
    let soft = cg.soft_adjacency(PairScope::AllPairs);
    let (_, final_intra_mass) = intra_mass(&soft, &cg.masks());
    let intra_edges = cg.intra_edge_count(PairScope::AllPairs);

    let (metrics, ranked, assignment) = match cfg.eval_mode {
        EvalMode::Assign => {
            let relay = trained_relay(cfg, &original, seed)?;
            let h = relay.forward(original.adjacency(), &original.features)?;
            let h_cond = relay.forward(&bipartite.dense_adjacency(), &cg.features())?;
            let nu = data.train.num_users();
            let (hu, hi) = (h.slice(ndarray::s![..nu, ..]).to_owned(), h.slice(ndarray::s![nu.., ..]).to_owned());
            let cu = h_cond.slice(ndarray::s![..cg.num_users(), ..]).to_owned();
            let ci = h_cond.slice(ndarray::s![cg.num_users().., ..]).to_owned();
            let assign = assign_representatives(&hu, &hi, &cu, &ci, seed)?;
            let ranked: Vec<TopK> = (0..nu)
                .map(|u| recommend_for_original(u, &model, &assign, &hu, &hi, cfg.k, data.train.user_items(u)))
                .collect::<Result<_>>()?;
            (score(&ranked, &data.test, cfg.k)?, ranked, Some(assign))
        }
        EvalMode::SelfEval => {
            let log = InteractionLog::from_dense_pairs(bipartite.edges())?;
            let inner = split(&log, cfg.split_ratio, seed)?;
            let m = bpr_train(&inner.train, &bpr, TrainedOn::Condensed)?;
            let ranked = rank_with_model(&m, &inner.train, cfg.k)?;
            (score(&ranked, &inner.test, cfg.k)?, ranked, None)
        }
    };
    Ok(SeedRun {
        seed,
        metrics,
        model,
        train_edges: bipartite.num_edges(),
        condensed: Some(CondensedArtifacts {
            graph: cg,
            report,
            bipartite,
            intra_edges,
            final_intra_mass,
            assignment,
        }),
        ranked,
    })
}

/// Runs the configured baseline, or the condensed pipeline when none is set.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(SeedRun, DatasetInfo, SplitDataset)> {
    let (_, data, info) = prepare(cfg, seed)?;
    let run = match cfg.baseline {
        Some(Baseline::Full) => run_full(cfg, &data, seed)?,
        Some(kind) => run_sampled(cfg, &data, kind, seed)?,
        None => run_condensed(cfg, &data, seed)?,
    };
    Ok((run, info, data))
}

/// Per-epoch recommender time on `graph`: median of `measured` epochs after
/// `warmup` epochs.
pub fn stage_two_epoch_time(cfg: &ExperimentConfig, graph: &BipartiteGraph, seed: u64, warmup: usize, measured: usize) -> Result<(f64, Vec<f64>)> {
    let bpr = bpr_config(cfg, seed);
    let init = bpr_train(graph, &BprConfig { epochs: 0, ..bpr.clone() }, TrainedOn::Original)?;
    let mut trainer = BprTrainer::new(graph.clone(), &bpr, init.user_emb, init.item_emb)?;
    time_epochs(warmup, measured, || trainer.epoch().map(|_| ()))
}

/// Stage-two cost on the original training graph versus a reduced one.
pub fn efficiency_probe(cfg: &ExperimentConfig, original: &BipartiteGraph, reduced: &BipartiteGraph, seed: u64) -> Result<(EfficiencyReport, EfficiencyReport)> {
    let probe = |g: &BipartiteGraph| -> Result<EfficiencyReport> {
        let (median, times) = stage_two_epoch_time(cfg, g, seed, 2, 7)?;
        Ok(EfficiencyReport {
            epoch_time_seconds: median,
            epoch_times: times,
            peak_bytes_estimate: bpr_memory_bytes(g.num_users(), g.num_items(), cfg.dim, g.num_edges()),
            edges_original: original.num_edges(),
            edges_condensed: g.num_edges(),
        })
    };
    Ok((probe(original)?, probe(reduced)?))
}
