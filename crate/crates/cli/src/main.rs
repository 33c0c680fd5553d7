use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use demorec::experiment::{
    ablate_bsl, bench, condense_only, pipeline, recommend_only, sweep, write_pipeline, ExperimentConfig, Manifest, SweepParam,
};
use demorec::Error;

#[derive(Parser, Debug)]
#[command(name = "demorec", version, about = "Condense a user-item graph and train a recommender on it")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stage One only: condense and export the graph with its match report.
    Condense(Common),
    /// Stage Two only: train and score the recommender on a given graph.
    Recommend {
        /// Interaction file, or a directory written by `condense`.
        #[arg(long)]
        graph: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Both stages plus evaluation, per seed, aggregated.
    Pipeline(Common),
    /// A reduced-data reference run.
    Baseline {
        #[arg(long, value_parser = ["full", "ransam", "majsam"])]
        kind: String,
        #[command(flatten)]
        common: Common,
    },
    /// Paired seeds with the bipartite loss on and off.
    AblateBsl(Common),
    /// Condensed pipeline over a grid of one hyper-parameter.
    Sweep {
        #[arg(long, value_parser = ["alpha", "lambda", "beta", "dim"])]
        param: String,
        /// Comma-separated grid; defaults to the built-in grid of `param`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage-two epoch time and memory on full, sampled and condensed graphs.
    Bench(Common),
}

/// Settings shared by every subcommand. Precedence, lowest first: preset,
/// manifest, config file, flags, `--set`.
#[derive(Args, Debug, Default)]
struct Common {
    #[arg(long, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    /// Re-run the config recorded in a `manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Interaction file; the built-in block model when absent.
    #[arg(long)]
    data: Option<String>,
    #[arg(long, value_parser = ["tsv", "csv"])]
    format: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_parser = ["gcn", "sage", "gat"])]
    backbone: Option<String>,
    #[arg(long, value_parser = ["gradient", "trajectory", "distribution"])]
    matching: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    epochs_condense: Option<usize>,
    #[arg(long)]
    epochs_rec: Option<usize>,
    /// Recommender learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_bsl: bool,
    #[arg(long, value_parser = ["assign", "self"])]
    eval_mode: Option<String>,
    #[arg(long, value_parser = ["full", "ransam", "majsam", "none"])]
    baseline: Option<String>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::default();
        if let Some(p) = &self.preset {
            cfg.set("preset", p)?;
        }
        if let Some(m) = &self.manifest {
            cfg = Manifest::load(m)?.config;
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            cfg.apply_str(&text)?;
        }
        let mut pairs: Vec<(&str, String)> = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k, v));
            }
        };
        put("data", self.data.clone());
        put("format", self.format.clone());
        put("alpha", self.alpha.map(|v| v.to_string()));
        put("lambda", self.lambda.map(|v| v.to_string()));
        put("beta", self.beta.map(|v| v.to_string()));
        put("tau", self.tau.map(|v| v.to_string()));
        put("backbone", self.backbone.clone());
        put("matching", self.matching.clone());
        put("dim", self.dim.map(|v| v.to_string()));
        put("k", self.k.map(|v| v.to_string()));
        put("seeds", self.seeds.clone());
        put("epochs_condense", self.epochs_condense.map(|v| v.to_string()));
        put("epochs_rec", self.epochs_rec.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        put("eval_mode", self.eval_mode.clone());
        put("baseline", self.baseline.clone());
        if self.no_bsl {
            put("bsl", Some("false".into()));
        }
        for (k, v) in pairs {
            cfg.set(k, &v)?;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config {
                    field: kv.clone(),
                    reason: "expected KEY=VALUE".into(),
                })?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("DEMOREC_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().with_context(|| format!("DEMOREC_THREADS must be a positive integer, got `{v}`"))?;
    anyhow::ensure!(n >= 1, "DEMOREC_THREADS must be at least 1");
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Condense(c) => {
            let cfg = c.resolve()?;
            for (seed, r) in condense_only(&cfg)? {
                println!(
                    "seed {seed}: {}x{} condensed, {} cross edges, {} intra edges",
                    r.users, r.items, r.cross_edges, r.intra_edges
                );
            }
            println!("wrote {}", cfg.out.display());
        }
        Command::Recommend { graph, common } => {
            let cfg = common.resolve()?;
            let r = recommend_only(&cfg, &graph)?;
            print!("{}", r.to_csv("recommend"));
        }
        Command::Pipeline(c) => {
            let cfg = c.resolve()?;
            let result = pipeline(&cfg)?;
            write_pipeline(&cfg, "pipeline", &result)?;
            print!("{}", result.report.to_csv(&result.label));
        }
        Command::Baseline { kind, common } => {
            let mut cfg = common.resolve()?;
            cfg.set("baseline", &kind)?;
            let result = pipeline(&cfg)?;
            write_pipeline(&cfg, "baseline", &result)?;
            print!("{}", result.report.to_csv(&result.label));
        }
        Command::AblateBsl(c) => {
            let cfg = c.resolve()?;
            println!("{}", demorec::experiment::AblationRow::csv_header());
            for row in ablate_bsl(&cfg)? {
                println!("{}", row.csv_row());
            }
        }
        Command::Sweep { param, values, common } => {
            let cfg = common.resolve()?;
            let param: SweepParam = param.parse()?;
            let values = if values.is_empty() { param.default_grid() } else { values };
            println!("{}", demorec::experiment::SweepRow::csv_header());
            for row in sweep(&cfg, param, &values)? {
                println!("{}", row.csv_row());
            }
        }
        Command::Bench(c) => {
            let cfg = c.resolve()?;
            println!("{}", demorec::experiment::BenchRow::csv_header());
            for row in bench(&cfg)? {
                println!("{}", row.csv_row());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // invalid settings are usage errors, like unknown flags
            if matches!(e.downcast_ref::<Error>(), Some(Error::Config { .. })) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
