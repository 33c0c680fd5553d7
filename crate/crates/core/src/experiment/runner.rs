use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Baseline, EvalMode, ExperimentConfig};
use super::pipeline::*;
use crate::condense::{MatchReport, ReportSummary};
use crate::condensed::{ExportMeta, PairScope};
use crate::error::{Error, Result};
use crate::eval::{EfficiencyReport, MetricsReport, RunMetrics};
use crate::graph::{k_core_filter, load_interactions_as, split, InteractionLog};
use crate::recommend::{write_jsonl, RankedList};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to repeat a run: the resolved config and the code
/// version. Written as `manifest.json` next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            seeds: cfg.seeds.clone(),
            config: cfg.clone(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Condensation facts of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedRecord {
    pub users: usize,
    pub items: usize,
    pub cross_edges: usize,
    pub intra_edges: usize,
    pub final_intra_mass: f64,
    pub report: Option<ReportSummary>,
}

impl CondensedRecord {
    fn of(c: &Condensation) -> Self {
        Self {
            users: c.graph.num_users(),
            items: c.graph.num_items(),
            cross_edges: c.cross_edges(),
            intra_edges: c.intra_edges(),
            final_intra_mass: c.final_intra_mass(),
            report: c.report.summary(),
        }
    }
}

/// The per-seed JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub metrics: RunMetrics,
    pub train_edges: usize,
    pub condensed: Option<CondensedRecord>,
}

/// Result of `pipeline` or `baseline` over all configured seeds.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub label: String,
    pub dataset: DatasetInfo,
    pub report: MetricsReport,
    pub records: Vec<SeedRecord>,
    pub runs: Vec<SeedRun>,
    pub log: InteractionLog,
}

fn run_label(cfg: &ExperimentConfig) -> String {
    cfg.baseline.map_or_else(|| "demorec".to_string(), |b| b.to_string())
}

/// Runs the configured pipeline (or baseline) for every seed in parallel.
pub fn pipeline(cfg: &ExperimentConfig) -> Result<PipelineResult> {
    cfg.validate()?;
    let per_seed: Vec<(SeedRun, DatasetInfo, InteractionLog)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (log, data, info) = prepare(cfg, seed)?;
            let run = match cfg.baseline {
                Some(Baseline::Full) => run_full(cfg, &data, seed)?,
                Some(kind) => run_sampled(cfg, &data, kind, seed)?,
                None => run_condensed(cfg, &data, seed)?,
            };
            Ok((run, info, log))
        })
        .collect::<Result<_>>()?;
    let dataset = per_seed[0].1.clone();
    let log = per_seed[0].2.clone();
    let runs: Vec<SeedRun> = per_seed.into_iter().map(|(r, _, _)| r).collect();
    let records: Vec<SeedRecord> = runs
        .iter()
        .map(|r| SeedRecord {
            seed: r.seed,
            metrics: r.metrics,
            train_edges: r.train_edges,
            condensed: r.condensed.as_ref().map(|c| CondensedRecord {
                users: c.graph.num_users(),
                items: c.graph.num_items(),
                cross_edges: c.bipartite.num_edges(),
                intra_edges: c.intra_edges,
                final_intra_mass: c.final_intra_mass,
                report: c.report.summary(),
            }),
        })
        .collect();
    let report = MetricsReport::aggregate(cfg.k, cfg.seeds.clone(), records.iter().map(|r| r.metrics).collect())?;
    Ok(PipelineResult {
        label: run_label(cfg),
        dataset,
        report,
        records,
        runs,
        log,
    })
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

pub fn write_manifest(out: &Path, command: &str, cfg: &ExperimentConfig) -> Result<()> {
    write_json(&out.join("manifest.json"), &Manifest::new(command, cfg))
}

fn match_report_csv(reports: &[(u64, &MatchReport)]) -> String {
    let mut text = String::from("seed,epoch,L_match,L_bip,L_cond,intra_mass\n");
    for (seed, report) in reports {
        for line in report.to_csv().lines().skip(1) {
            writeln!(text, "{seed},{line}").expect("string write");
        }
    }
    text
}

fn ranked_lists(run: &SeedRun, log: &InteractionLog, cfg: &ExperimentConfig) -> Vec<RankedList> {
    // Self-evaluation ranks condensed entities, which have no original id.
    let condensed_ids = cfg.eval_mode == EvalMode::SelfEval && run.condensed.is_some();
    run.ranked
        .iter()
        .enumerate()
        .map(|(u, top)| RankedList {
            user: if condensed_ids { format!("u'{u}") } else { log.user_id(u).to_string() },
            items: top
                .items
                .iter()
                .map(|&i| if condensed_ids { format!("i'{i}") } else { log.item_id(i).to_string() })
                .collect(),
            scores: top.scores.clone(),
        })
        .collect()
}

/// Writes every artifact of a pipeline run under `cfg.out`.
///
/// `metrics.json` depends only on the manifest; timing goes to
/// `efficiency.json`.
pub fn write_pipeline(cfg: &ExperimentConfig, command: &str, result: &PipelineResult) -> Result<()> {
    let out = cfg.out.as_path();
    write_manifest(out, command, cfg)?;
    write_json(&out.join("dataset.json"), &result.dataset)?;
    write_json(&out.join("metrics.json"), &result.report)?;
    write(&out.join("metrics.csv"), result.report.to_csv(&result.label))?;
    for (record, run) in result.records.iter().zip(&result.runs) {
        write_json(&out.join("seeds").join(format!("seed_{}.json", record.seed)), record)?;
        let mut jsonl = Vec::new();
        write_jsonl(&mut jsonl, &ranked_lists(run, &result.log, cfg))?;
        write(&out.join("ranked").join(format!("seed_{}.jsonl", record.seed)), jsonl)?;
        if let Some(c) = &run.condensed {
            let meta = ExportMeta {
                lambda: cfg.lambda,
                beta: cfg.beta,
                seed: run.seed,
            };
            c.graph.export(out.join("condensed").join(format!("seed_{}", run.seed)), &meta, PairScope::AllPairs)?;
        }
    }
    let reports: Vec<(u64, &MatchReport)> =
        result.runs.iter().filter_map(|r| r.condensed.as_ref().map(|c| (r.seed, &c.report))).collect();
    if !reports.is_empty() {
        write(&out.join("match_report.csv"), match_report_csv(&reports))?;
    }
    let first = &result.runs[0];
    let (_, data, _) = prepare(cfg, first.seed)?;
    let reduced = match &first.condensed {
        Some(c) => c.bipartite.clone(),
        None => first_training_graph(cfg, &data, first.seed)?,
    };
    let (full, reduced) = efficiency_probe(cfg, &data.train, &reduced, first.seed)?;
    write_json(&out.join("efficiency.json"), &serde_json::json!({ "original": full, result.label.as_str(): reduced }))?;
    Ok(())
}

fn first_training_graph(cfg: &ExperimentConfig, data: &crate::graph::SplitDataset, seed: u64) -> Result<crate::graph::BipartiteGraph> {
    use crate::graph::{sample_subgraph_degree, sample_subgraph_random};
    Ok(match cfg.baseline {
        Some(Baseline::Ransam) => sample_subgraph_random(&data.train, cfg.alpha, seed)?.graph,
        Some(Baseline::Majsam) => sample_subgraph_degree(&data.train, cfg.alpha)?.graph,
        _ => data.train.clone(),
    })
}

/// Stage One only: condense every seed and export the graphs with their
/// match reports.
pub fn condense_only(cfg: &ExperimentConfig) -> Result<Vec<(u64, CondensedRecord)>> {
    cfg.validate()?;
    let out = cfg.out.as_path();
    let done: Vec<(u64, Condensation)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (_, data, _) = prepare(cfg, seed)?;
            Ok((seed, condense_seed(cfg, &data, seed)?))
        })
        .collect::<Result<_>>()?;
    write_manifest(out, "condense", cfg)?;
    let mut records = Vec::new();
    for (seed, c) in &done {
        let meta = ExportMeta {
            lambda: cfg.lambda,
            beta: cfg.beta,
            seed: *seed,
        };
        c.graph.export(out.join("condensed").join(format!("seed_{seed}")), &meta, PairScope::AllPairs)?;
        write(&out.join("condensed").join(format!("seed_{seed}")).join("match_report.json"), c.report.to_json())?;
        records.push((*seed, CondensedRecord::of(c)));
    }
    let reports: Vec<(u64, &MatchReport)> = done.iter().map(|(s, c)| (*s, &c.report)).collect();
    write(&out.join("match_report.csv"), match_report_csv(&reports))?;
    write_json(&out.join("condensed.json"), &records)?;
    Ok(records)
}

/// Stage Two alone on an interaction file or a condensed export directory,
/// scored on a held-out split of that graph.
pub fn recommend_only(cfg: &ExperimentConfig, graph: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let file: PathBuf = if graph.is_dir() { graph.join("adjacency_edgelist.tsv") } else { graph.to_path_buf() };
    let log = k_core_filter(&load_interactions_as(&file, cfg.format)?, 1)?;
    let runs: Vec<(SeedRun, Vec<RankedList>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let data = split(&log, cfg.split_ratio, seed)?;
            let run = run_full(cfg, &data, seed)?;
            let lists = ranked_lists(&run, &log, &ExperimentConfig { eval_mode: EvalMode::Assign, ..cfg.clone() });
            Ok((run, lists))
        })
        .collect::<Result<_>>()?;
    let out = cfg.out.as_path();
    write_manifest(out, "recommend", cfg)?;
    let report = MetricsReport::aggregate(cfg.k, cfg.seeds.clone(), runs.iter().map(|(r, _)| r.metrics).collect())?;
    write_json(&out.join("metrics.json"), &report)?;
    write(&out.join("metrics.csv"), report.to_csv("recommend"))?;
    for (run, lists) in &runs {
        let mut jsonl = Vec::new();
        write_jsonl(&mut jsonl, lists)?;
        write(&out.join("ranked").join(format!("seed_{}.jsonl", run.seed)), jsonl)?;
    }
    Ok(report)
}

/// One seed of a condensed run whose Stage Two may not have happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedOutcome {
    pub seed: u64,
    pub condensed: CondensedRecord,
    pub metrics: Option<RunMetrics>,
    /// Why Stage Two did not run, e.g. an empty export.
    pub error: Option<String>,
}

/// Condenses one seed and, when the export has edges, trains and scores the
/// recommender. Only condensation failures are errors.
pub fn condensed_outcome(cfg: &ExperimentConfig, seed: u64) -> Result<CondensedOutcome> {
    let (_, data, _) = prepare(cfg, seed)?;
    let c = condense_seed(cfg, &data, seed)?;
    let condensed = CondensedRecord::of(&c);
    let (metrics, error) = match recommend_condensed(cfg, &data, c, seed) {
        Ok(run) => (Some(run.metrics), None),
        Err(e @ (Error::EmptyCondensed { .. } | Error::SaturatedCondensed { .. })) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    Ok(CondensedOutcome {
        seed,
        condensed,
        metrics,
        error,
    })
}

/// Paired rows of the BSL ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub on: CondensedOutcome,
    pub off: CondensedOutcome,
}

impl AblationRow {
    pub fn csv_header() -> &'static str {
        "seed,intra_mass_on,intra_mass_off,intra_edges_on,intra_edges_off,cross_edges_on,cross_edges_off,recall_on,recall_off"
    }

    pub fn csv_row(&self) -> String {
        let recall = |o: &CondensedOutcome| o.metrics.map_or(String::new(), |m| m.recall.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.on.condensed.final_intra_mass,
            self.off.condensed.final_intra_mass,
            self.on.condensed.intra_edges,
            self.off.condensed.intra_edges,
            self.on.condensed.cross_edges,
            self.off.condensed.cross_edges,
            recall(&self.on),
            recall(&self.off)
        )
    }
}

/// Runs every seed with and without the bipartite loss.
pub fn ablate_bsl(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let on = ExperimentConfig { bsl: true, ..cfg.clone() };
    let off = ExperimentConfig { bsl: false, ..cfg.clone() };
    let rows: Vec<AblationRow> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            Ok(AblationRow {
                seed,
                on: condensed_outcome(&on, seed)?,
                off: condensed_outcome(&off, seed)?,
            })
        })
        .collect::<Result<_>>()?;
    let out = cfg.out.as_path();
    write_manifest(out, "ablate-bsl", cfg)?;
    let mut csv = format!("{}\n", AblationRow::csv_header());
    for r in &rows {
        writeln!(csv, "{}", r.csv_row()).expect("string write");
    }
    write(&out.join("ablate_bsl.csv"), csv)?;
    write_json(&out.join("ablate_bsl.json"), &rows)?;
    Ok(rows)
}

/// Hyper-parameters with a built-in grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Alpha,
    Lambda,
    Beta,
    Dim,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Lambda => "lambda",
            SweepParam::Beta => "beta",
            SweepParam::Dim => "dim",
        }
    }

    pub fn default_grid(self) -> Vec<String> {
        let grid: &[&str] = match self {
            SweepParam::Alpha => &["0.2", "0.5", "0.8", "1.0"],
            SweepParam::Lambda => &["0.01", "0.1", "0.3", "0.5", "1.0"],
            SweepParam::Beta => &["0.1", "0.3", "0.6", "1.0"],
            SweepParam::Dim => &["64", "128", "256", "512"],
        };
        grid.iter().map(|s| s.to_string()).collect()
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alpha" => Ok(SweepParam::Alpha),
            "lambda" => Ok(SweepParam::Lambda),
            "beta" => Ok(SweepParam::Beta),
            "dim" => Ok(SweepParam::Dim),
            _ => Err(Error::config("param", format!("unknown sweep parameter `{s}`"))),
        }
    }
}

/// One grid point, aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    /// The grid value exactly as given.
    pub value: String,
    pub outcomes: Vec<CondensedOutcome>,
    /// Full-graph baseline recall per seed at this grid point.
    pub full_recall: Vec<f64>,
    /// Aggregate over seeds whose Stage Two ran.
    pub metrics: Option<MetricsReport>,
    /// Seeds whose export has no intra-group edge, as a fraction.
    pub bipartite_rate: f64,
    pub mean_intra_mass: f64,
    /// Mean over seeds of condensed recall divided by full recall; seeds
    /// without Stage Two count as zero recall.
    pub relative_recall: f64,
}

impl SweepRow {
    pub fn csv_header() -> &'static str {
        "param,value,P@K,N@K,R@K,Std_R,full_R@K,relative_recall,bipartite_rate,intra_mass,stage_two_runs"
    }

    pub fn csv_row(&self) -> String {
        let (p, n, r, sr) = self
            .metrics
            .as_ref()
            .map_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN), |m| (m.precision_k, m.ndcg_k, m.recall_k, m.std.recall));
        let full = self.full_recall.iter().sum::<f64>() / self.full_recall.len() as f64;
        let ran = self.outcomes.iter().filter(|o| o.metrics.is_some()).count();
        format!(
            "{},{},{p},{n},{r},{sr},{full},{},{},{},{ran}",
            self.param, self.value, self.relative_recall, self.bipartite_rate, self.mean_intra_mass
        )
    }
}

/// Condensed pipeline at every grid value of `param`, with the full
/// baseline at the same setting for reference.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[String]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::config("values", "sweep grid is empty"));
    }
    let points: Vec<ExperimentConfig> = values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.set(param.key(), v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..points.len()).flat_map(|p| cfg.seeds.iter().map(move |&s| (p, s))).collect();
    let done: Vec<(CondensedOutcome, f64)> = jobs
        .par_iter()
        .map(|&(p, seed)| {
            let c = &points[p];
            let outcome = condensed_outcome(c, seed)?;
            let (_, data, _) = prepare(c, seed)?;
            let full = run_full(c, &data, seed)?.metrics.recall;
            Ok((outcome, full))
        })
        .collect::<Result<_>>()?;
    let n = cfg.seeds.len();
    let rows: Vec<SweepRow> = values
        .iter()
        .enumerate()
        .map(|(p, value)| {
            let chunk = &done[p * n..(p + 1) * n];
            let outcomes: Vec<CondensedOutcome> = chunk.iter().map(|(o, _)| o.clone()).collect();
            let full_recall: Vec<f64> = chunk.iter().map(|(_, f)| *f).collect();
            let ran: Vec<(u64, RunMetrics)> = outcomes.iter().filter_map(|o| o.metrics.map(|m| (o.seed, m))).collect();
            let metrics = if ran.is_empty() {
                None
            } else {
                Some(MetricsReport::aggregate(cfg.k, ran.iter().map(|r| r.0).collect(), ran.iter().map(|r| r.1).collect())?)
            };
            let bipartite = outcomes.iter().filter(|o| o.condensed.intra_edges == 0).count();
            let relative = outcomes
                .iter()
                .zip(&full_recall)
                .map(|(o, f)| o.metrics.map_or(0.0, |m| m.recall) / f.max(f64::MIN_POSITIVE))
                .sum::<f64>()
                / n as f64;
            Ok(SweepRow {
                param: param.key().to_string(),
                value: value.clone(),
                mean_intra_mass: outcomes.iter().map(|o| o.condensed.final_intra_mass).sum::<f64>() / n as f64,
                bipartite_rate: bipartite as f64 / n as f64,
                relative_recall: relative,
                outcomes,
                full_recall,
                metrics,
            })
        })
        .collect::<Result<_>>()?;
    let out = cfg.out.as_path();
    write_manifest(out, &format!("sweep:{}", param.key()), cfg)?;
    let mut csv = format!("{}\n", SweepRow::csv_header());
    for r in &rows {
        writeln!(csv, "{}", r.csv_row()).expect("string write");
    }
    write(&out.join(format!("sweep_{}.csv", param.key())), csv)?;
    write_json(&out.join(format!("sweep_{}.json", param.key())), &rows)?;
    Ok(rows)
}

/// One row of the efficiency table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub report: EfficiencyReport,
}

impl BenchRow {
    pub fn csv_header() -> &'static str {
        "method,epoch_time_seconds,peak_bytes_estimate,edges,edge_ratio"
    }

    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!("{},{},{},{},{}", self.method, r.epoch_time_seconds, r.peak_bytes_estimate, r.edges_condensed, r.edge_ratio())
    }
}

/// Stage-two epoch time and memory of the recommender on the full training
/// graph, both sampled baselines and the condensed graph, for the first seed.
pub fn bench(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    use crate::graph::{sample_subgraph_degree, sample_subgraph_random};
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let (_, data, _) = prepare(cfg, seed)?;
    let c = condense_seed(cfg, &data, seed)?;
    let graphs = [
        ("full", data.train.clone()),
        ("ransam", sample_subgraph_random(&data.train, cfg.alpha, seed)?.graph),
        ("majsam", sample_subgraph_degree(&data.train, cfg.alpha)?.graph),
        ("demorec", c.graph.to_bipartite(PairScope::AllPairs)),
    ];
    let mut rows = Vec::new();
    for (method, g) in graphs {
        if g.num_edges() == 0 {
            log::warn!("bench: {method} graph has no edges; skipped");
            continue;
        }
        let (_, report) = efficiency_probe(cfg, &data.train, &g, seed)?;
        rows.push(BenchRow {
            method: method.to_string(),
            report,
        });
    }
    let out = cfg.out.as_path();
    write_manifest(out, "bench", cfg)?;
    write_json(&out.join("efficiency.json"), &rows)?;
    let mut csv = format!("{}\n", BenchRow::csv_header());
    for r in &rows {
        writeln!(csv, "{}", r.csv_row()).expect("string write");
    }
    write(&out.join("efficiency.csv"), csv)?;
    Ok(rows)
}
