use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::condense::{Distance, Matching};
use crate::error::{Error, Result};
use crate::graph::EdgeFormat;
use crate::relay::{Backbone, Negatives};

/// How a model trained on the condensed graph is scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Original users and items are mapped to condensed representatives and
    /// ranked against the original test set.
    #[default]
    Assign,
    /// Held-out condensed edges, for diagnostics only.
    #[serde(rename = "self")]
    SelfEval,
}

/// Reduced-data reference points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// BPR on the whole training graph.
    Full,
    /// BPR on a uniformly sampled subgraph.
    Ransam,
    /// BPR on the highest-degree users and items.
    Majsam,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    #[default]
    Random,
    /// Exact copy of the training graph (`alpha = 1` only).
    Copy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

macro_rules! named_enum {
    ($ty:ty, $field:literal, $($name:literal => $val:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($val),)+
                    _ => Err(Error::config($field, format!("unknown value `{s}`"))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $val { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

named_enum!(EvalMode, "eval_mode", "assign" => EvalMode::Assign, "self" => EvalMode::SelfEval);
named_enum!(Baseline, "baseline", "full" => Baseline::Full, "ransam" => Baseline::Ransam, "majsam" => Baseline::Majsam);
named_enum!(Init, "init", "random" => Init::Random, "copy" => Init::Copy);
named_enum!(Preset, "preset", "desk" => Preset::Desk, "paper" => Preset::Paper);

/// Built-in bipartite block-model dataset used when no data file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub seed: u64,
}

/// Everything one experiment needs. Serialized verbatim into the run
/// manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub data: Option<PathBuf>,
    pub format: EdgeFormat,
    pub synthetic: SyntheticSpec,
    pub k_core: usize,
    pub split_ratio: f64,

    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    pub tau: f64,
    pub bsl: bool,
    pub backbone: Backbone,
    pub layers: usize,
    pub matching: Matching,
    pub distance: Distance,
    pub init: Init,
    pub inner_steps: usize,
    pub theta_samples: usize,
    pub negatives: Negatives,
    pub straight_through: bool,
    pub cross_only: bool,
    pub epochs_condense: usize,
    pub lr_condense: f64,
    pub lr_inner: f64,
    pub interleaved: bool,

    pub relay_steps: usize,
    pub relay_lr: f64,

    pub dim: usize,
    pub k: usize,
    pub epochs_rec: usize,
    pub lr: f64,
    pub reg: f64,
    pub eval_mode: EvalMode,
    pub baseline: Option<Baseline>,

    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = Self {
            preset,
            data: None,
            format: EdgeFormat::Tsv,
            synthetic: SyntheticSpec {
                users: 200,
                items: 300,
                blocks: 5,
                p_in: 0.3,
                p_out: 0.01,
                seed: 7,
            },
            k_core: 10,
            split_ratio: 0.8,
            alpha: 0.8,
            lambda: 0.3,
            beta: 0.6,
            tau: 0.5,
            bsl: true,
            backbone: Backbone::Gcn,
            layers: 2,
            matching: Matching::Gradient,
            distance: Distance::Cosine,
            init: Init::Random,
            inner_steps: 2,
            theta_samples: 3,
            negatives: Negatives::default(),
            straight_through: false,
            cross_only: false,
            epochs_condense: 100,
            lr_condense: 0.001,
            lr_inner: 0.1,
            interleaved: false,
            relay_steps: 100,
            relay_lr: 0.5,
            dim: 64,
            k: 20,
            epochs_rec: 40,
            lr: 0.05,
            reg: 1e-4,
            eval_mode: EvalMode::Assign,
            baseline: None,
            seeds: vec![1024, 2046, 4096],
            out: PathBuf::from("runs/latest"),
        };
        if preset == Preset::Paper {
            c.dim = 256;
            c.layers = 3;
            c.epochs_condense = 1000;
        }
        c
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value.trim() {
                "true" | "on" | "yes" | "1" => Ok(true),
                "false" | "off" | "no" | "0" => Ok(false),
                _ => Err(Error::config(key, format!("expected a boolean, got `{value}`"))),
            }
        }
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "preset" => {
                let mut fresh = Self::preset(num(&key, v)?);
                fresh.data = self.data.take();
                fresh.out = std::mem::take(&mut self.out);
                *self = fresh;
            }
            "data" => self.data = (!v.is_empty() && v != "synthetic").then(|| PathBuf::from(v)),
            "format" => self.format = v.parse()?,
            "synthetic_users" => self.synthetic.users = num(&key, v)?,
            "synthetic_items" => self.synthetic.items = num(&key, v)?,
            "synthetic_blocks" => self.synthetic.blocks = num(&key, v)?,
            "p_in" => self.synthetic.p_in = num(&key, v)?,
            "p_out" => self.synthetic.p_out = num(&key, v)?,
            "data_seed" => self.synthetic.seed = num(&key, v)?,
            "k_core" => self.k_core = num(&key, v)?,
            "split_ratio" => self.split_ratio = num(&key, v)?,
            "alpha" => self.alpha = num(&key, v)?,
            "lambda" => self.lambda = num(&key, v)?,
            "beta" => self.beta = num(&key, v)?,
            "tau" => self.tau = num(&key, v)?,
            "bsl" => self.bsl = flag(&key, v)?,
            "backbone" => self.backbone = v.parse()?,
            "layers" => self.layers = num(&key, v)?,
            "matching" => self.matching = v.parse()?,
            "distance" => self.distance = v.parse()?,
            "init" => self.init = v.parse()?,
            "inner_steps" => self.inner_steps = num(&key, v)?,
            "theta_samples" => self.theta_samples = num(&key, v)?,
            "negatives" => self.negatives = v.parse()?,
            "straight_through" => self.straight_through = flag(&key, v)?,
            "cross_only" => self.cross_only = flag(&key, v)?,
            "epochs_condense" => self.epochs_condense = num(&key, v)?,
            "lr_condense" => self.lr_condense = num(&key, v)?,
            "lr_inner" => self.lr_inner = num(&key, v)?,
            "interleaved" => self.interleaved = flag(&key, v)?,
            "relay_steps" => self.relay_steps = num(&key, v)?,
            "relay_lr" => self.relay_lr = num(&key, v)?,
            "dim" => self.dim = num(&key, v)?,
            "k" => self.k = num(&key, v)?,
            "epochs_rec" => self.epochs_rec = num(&key, v)?,
            "lr" | "lr_rec" => self.lr = num(&key, v)?,
            "reg" => self.reg = num(&key, v)?,
            "eval_mode" => self.eval_mode = v.parse()?,
            "baseline" => self.baseline = if v == "none" || v.is_empty() { None } else { Some(v.parse()?) },
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(&key, s))
                    .collect::<Result<_>>()?
            }
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::config(key, "unknown setting")),
        }
        Ok(())
    }

    /// Parses flat `key = value` text. `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_str(text)?;
        Ok(c)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: "config".into(),
                line: n + 1,
                reason: format!("expected key = value, got `{line}`"),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Flat `key = value` rendering that [`parse_str`](Self::parse_str)
    /// reads back to an equal config.
    pub fn to_key_values(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let data = self.data.as_ref().map_or("synthetic".to_string(), |p| p.display().to_string());
        let baseline = self.baseline.map_or("none".to_string(), |b| b.to_string());
        let s = &self.synthetic;
        [
            format!("preset = {}", self.preset),
            format!("data = {data}"),
            format!("format = {}", self.format),
            format!("synthetic_users = {}", s.users),
            format!("synthetic_items = {}", s.items),
            format!("synthetic_blocks = {}", s.blocks),
            format!("p_in = {}", s.p_in),
            format!("p_out = {}", s.p_out),
            format!("data_seed = {}", s.seed),
            format!("k_core = {}", self.k_core),
            format!("split_ratio = {}", self.split_ratio),
            format!("alpha = {}", self.alpha),
            format!("lambda = {}", self.lambda),
            format!("beta = {}", self.beta),
            format!("tau = {}", self.tau),
            format!("bsl = {}", self.bsl),
            format!("backbone = {}", self.backbone),
            format!("layers = {}", self.layers),
            format!("matching = {}", self.matching),
            format!("distance = {}", self.distance),
            format!("init = {}", self.init),
            format!("inner_steps = {}", self.inner_steps),
            format!("theta_samples = {}", self.theta_samples),
            format!("negatives = {}", self.negatives),
            format!("straight_through = {}", self.straight_through),
            format!("cross_only = {}", self.cross_only),
            format!("epochs_condense = {}", self.epochs_condense),
            format!("lr_condense = {}", self.lr_condense),
            format!("lr_inner = {}", self.lr_inner),
            format!("interleaved = {}", self.interleaved),
            format!("relay_steps = {}", self.relay_steps),
            format!("relay_lr = {}", self.relay_lr),
            format!("dim = {}", self.dim),
            format!("k = {}", self.k),
            format!("epochs_rec = {}", self.epochs_rec),
            format!("lr = {}", self.lr),
            format!("reg = {}", self.reg),
            format!("eval_mode = {}", self.eval_mode),
            format!("baseline = {baseline}"),
            format!("seeds = {}", seeds.join(",")),
            format!("out = {}", self.out.display()),
        ]
        .join("\n")
            + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: &str| if ok { Ok(()) } else { Err(Error::config(field, reason)) };
        let s = &self.synthetic;
        check(s.users >= 1 && s.items >= 1, "synthetic_users", "synthetic sizes must be at least 1")?;
        check(s.blocks >= 1 && s.blocks <= s.users.min(s.items), "synthetic_blocks", "must be in 1..=min(users, items)")?;
        check((0.0..=1.0).contains(&s.p_in) && (0.0..=1.0).contains(&s.p_out), "p_in", "probabilities must be in [0, 1]")?;
        check(self.k_core >= 1, "k_core", "must be at least 1")?;
        check(self.split_ratio > 0.0 && self.split_ratio < 1.0, "split_ratio", "must be in (0, 1)")?;
        check(self.alpha > 0.0 && self.alpha <= 1.0, "alpha", "must be in (0, 1]")?;
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda", "must be a finite value >= 0")?;
        check(self.beta >= 0.0 && self.beta.is_finite(), "beta", "must be a finite value >= 0")?;
        check(self.tau > 0.0 && self.tau < 1.0, "tau", "must be in (0, 1)")?;
        check(self.layers >= 1, "layers", "must be at least 1")?;
        check(self.inner_steps >= 1, "inner_steps", "must be at least 1")?;
        check(self.theta_samples >= 1, "theta_samples", "must be at least 1")?;
        check(self.lr_condense > 0.0, "lr_condense", "must be positive")?;
        check(self.lr_inner >= 0.0, "lr_inner", "must be >= 0")?;
        check(self.relay_lr >= 0.0, "relay_lr", "must be >= 0")?;
        check(self.dim >= 1, "dim", "must be at least 1")?;
        check(self.k >= 1, "k", "must be at least 1")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be a finite value > 0")?;
        check(self.reg >= 0.0, "reg", "must be >= 0")?;
        check(!self.seeds.is_empty(), "seeds", "must list at least one seed")?;
        check(self.init == Init::Random || self.alpha == 1.0, "init", "copy initialization needs alpha = 1")?;
        Ok(())
    }
}
