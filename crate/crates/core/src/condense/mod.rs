//! Optimization of a condensed graph against an original one: a bipartite
//! structure penalty plus a matching loss that makes relay models train the
//! same way on both graphs.

mod matching;
mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::Adam;
use crate::autodiff::{Matrix, Tape};
use crate::condensed::{bsl_on, condensed_size, intra_mass, soft_adjacency_on, CondensedGraph, InitScheme, PairScope};
use crate::error::{Error, Result};
use crate::relay::{Negatives, RelayConfig, RelayModel};

pub use matching::{
    cosine_distance, distance, distance_on, distribution_match, gradient_match, gradient_match_step, l2_distance,
    trajectory_match, ZERO_NORM,
    CondensedVars, CondensedView, Distance, ExpertTrajectory, MatchOutcome, Matching, OriginalSide,
};
pub use report::{EpochRecord, MatchReport, ReportSummary};

/// How the condensed tables are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CondensedInit {
    Random(InitScheme),
    /// Exact copy of the original graph; needs `alpha = 1` and
    /// `d >= N + M`.
    Copy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensationConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    pub tau: f64,
    pub strategy: Matching,
    pub distance: Distance,
    pub inner_steps: usize,
    pub theta_samples: usize,
    pub outer_epochs: usize,
    pub lr_outer: f64,
    pub lr_inner: f64,
    pub seed: u64,
    pub relay: RelayConfig,
    pub view: CondensedView,
    pub init: CondensedInit,
    /// Logit margin used by [`CondensedInit::Copy`].
    pub copy_margin: f64,
    pub second_moments: bool,
    pub expert_checkpoints: usize,
    pub expert_every: usize,
    pub expert_delta: usize,
}

impl CondensationConfig {
    /// Desk-scale defaults for a relay whose input width is `dim`.
    pub fn new(dim: usize, relay: RelayConfig) -> Self {
        debug_assert_eq!(relay.in_dim, dim);
        Self {
            alpha: 0.8,
            lambda: 0.3,
            beta: 0.6,
            tau: 0.5,
            strategy: Matching::Gradient,
            distance: Distance::Cosine,
            inner_steps: 2,
            theta_samples: 3,
            outer_epochs: 100,
            lr_outer: 0.001,
            lr_inner: 0.1,
            seed: 1024,
            relay,
            view: CondensedView::default(),
            init: CondensedInit::Random(InitScheme::Gaussian),
            copy_margin: 30.0,
            second_moments: false,
            expert_checkpoints: 6,
            expert_every: 5,
            expert_delta: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: &str| if ok { Ok(()) } else { Err(Error::config(field, reason)) };
        check(self.alpha > 0.0 && self.alpha <= 1.0, "alpha", "must be in (0, 1]")?;
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda", "must be a finite value >= 0")?;
        check(self.beta >= 0.0 && self.beta.is_finite(), "beta", "must be a finite value >= 0")?;
        check(self.tau > 0.0 && self.tau < 1.0, "tau", "must be in (0, 1)")?;
        check(self.inner_steps >= 1, "inner_steps", "must be at least 1")?;
        check(self.theta_samples >= 1, "theta_samples", "must be at least 1")?;
        check(self.lr_outer > 0.0, "lr_outer", "must be positive")?;
        check(self.lr_inner >= 0.0, "lr_inner", "must be >= 0")?;
        check(!matches!(self.view.negatives, Negatives::Degree(0) | Negatives::Unobserved(0)), "negatives", "need at least one negative per edge")?;
        if self.strategy == Matching::Trajectory {
            check(self.expert_delta >= 1, "expert_delta", "must be at least 1")?;
            check(self.expert_checkpoints > self.expert_delta, "expert_checkpoints", "must exceed expert_delta")?;
            check(self.expert_every >= 1, "expert_every", "must be at least 1")?;
        }
        if self.init == CondensedInit::Copy {
            check(self.alpha == 1.0, "init", "copy initialization needs alpha = 1")?;
        }
        Ok(())
    }

    /// Gradient steps the trajectory student takes per segment, equal to the
    /// expert's.
    pub fn student_steps(&self) -> usize {
        self.expert_delta * self.expert_every
    }
}

/// Seed of relay draw `sample` in outer epoch `epoch`.
fn theta_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7e7a);
    rng.set_stream((epoch as u64) << 16 | sample as u64);
    rng.random()
}

pub fn initial_graph(config: &CondensationConfig, original: &OriginalSide) -> Result<CondensedGraph> {
    let g = &original.graph;
    let (nu, ni) = (condensed_size(g.num_users(), config.alpha), condensed_size(g.num_items(), config.alpha));
    match config.init {
        CondensedInit::Random(scheme) => {
            CondensedGraph::init(nu, ni, original.features.ncols(), config.tau, config.seed, scheme)
        }
        CondensedInit::Copy => CondensedGraph::copy_of(g, &original.features, config.copy_margin, config.tau),
    }
}

/// Per-epoch hook: receives the epoch index and the graph after that
/// epoch's update.
pub type EpochHook<'a> = dyn FnMut(usize, &CondensedGraph) -> Result<()> + 'a;

/// Runs the outer loop for `config.outer_epochs` epochs.
pub fn condense(config: &CondensationConfig, original: &OriginalSide) -> Result<(CondensedGraph, MatchReport)> {
    condense_with(config, original, initial_graph(config, original)?, &mut |_, _| Ok(()))
}

/// [`condense`] starting from `cg`, calling `hook` after every epoch.
pub fn condense_with(
    config: &CondensationConfig,
    original: &OriginalSide,
    mut cg: CondensedGraph,
    hook: &mut EpochHook<'_>,
) -> Result<(CondensedGraph, MatchReport)> {
    config.validate()?;
    if config.relay.in_dim != cg.dim() || original.features.ncols() != cg.dim() {
        return Err(Error::invalid("condense", "relay input width, feature width and embedding width must agree"));
    }
    let expert = match config.strategy {
        Matching::Trajectory => {
            let theta0 = RelayModel::sample_theta(config.relay, theta_seed(config.seed, usize::MAX >> 16, 0)).weights;
            Some(ExpertTrajectory::record(
                original,
                &config.relay,
                &theta0,
                config.view.negatives,
                config.expert_checkpoints,
                config.expert_every,
                config.lr_inner,
            )?)
        }
        _ => None,
    };
    let masks = cg.masks();
    let mut adam = Adam::new(config.lr_outer);
    let mut report = MatchReport::default();

    for epoch in 0..config.outer_epochs {
        let outcomes: Vec<Result<MatchOutcome>> = (0..config.theta_samples)
            .into_par_iter()
            .map(|sample| {
                let seed = theta_seed(config.seed, epoch, sample);
                match config.strategy {
                    Matching::Gradient => {
                        let theta = RelayModel::sample_theta(config.relay, seed).weights;
                        gradient_match(
                            &cg,
                            original,
                            &config.relay,
                            &theta,
                            &config.view,
                            config.distance,
                            config.inner_steps,
                            config.lr_inner,
                        )
                    }
                    Matching::Distribution => {
                        let theta = RelayModel::sample_theta(config.relay, seed).weights;
                        distribution_match(&cg, original, &config.relay, &theta, &config.view, config.second_moments)
                    }
                    Matching::Trajectory => {
                        let expert = expert.as_ref().expect("recorded above");
                        let last_start = expert.checkpoints.len() - config.expert_delta;
                        let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..last_start);
                        trajectory_match(
                            &cg,
                            expert,
                            &config.relay,
                            &config.view,
                            start,
                            config.expert_delta,
                            config.student_steps(),
                            config.lr_inner,
                        )
                    }
                }
            })
            .collect();
        let samples = config.theta_samples as f64;
        let mut l_match = 0.0;
        let mut g_match = [
            Matrix::zeros(cg.user_emb.dim()),
            Matrix::zeros(cg.item_emb.dim()),
            Matrix::zeros(cg.transform.dim()),
        ];
        for outcome in outcomes {
            let outcome = outcome?;
            l_match += outcome.value / samples;
            for (acc, g) in g_match.iter_mut().zip(&outcome.grads) {
                acc.scaled_add(1.0 / samples, g);
            }
        }

        let mut tape = Tape::new();
        let u = tape.param(cg.user_emb.clone());
        let i = tape.param(cg.item_emb.clone());
        let w = tape.param(cg.transform.clone());
        let s = soft_adjacency_on(&mut tape, u, i, w, PairScope::AllPairs)?;
        let (_, mass) = intra_mass(tape.value(s), &masks);
        let bip = bsl_on(&mut tape, s, config.lambda, &masks)?;
        let l_bip = tape.scalar(bip);
        let g_bip = tape.grad(bip, &[u, i, w])?;
        let l_cond = l_bip + config.beta * l_match;

        let diverged = |quantity: &'static str, cg: &CondensedGraph| Error::Diverged {
            epoch,
            quantity,
            last_good: Box::new(cg.clone()),
        };
        if !l_match.is_finite() {
            return Err(diverged("matching loss", &cg));
        }
        if !l_cond.is_finite() {
            return Err(diverged("condensation loss", &cg));
        }
        let grads: Vec<Matrix> = g_bip
            .iter()
            .zip(&g_match)
            .map(|(b, m)| b + &(m * config.beta))
            .collect();
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(diverged("gradient", &cg));
        }
        report.push(EpochRecord {
            epoch,
            l_match,
            l_bip,
            l_cond,
            intra_mass: mass,
        });
        let last_good = cg.clone();
        adam.step(&mut [&mut cg.user_emb, &mut cg.item_emb, &mut cg.transform], &grads);
        if !cg.is_finite() {
            return Err(Error::Diverged {
                epoch,
                quantity: "parameters",
                last_good: Box::new(last_good),
            });
        }
        log::debug!("epoch {epoch}: match {l_match:.6} bip {l_bip:.6} intra {mass:.4}");
        hook(epoch, &cg)?;
    }
    Ok((cg, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::synthetic::BlockModel;
    use crate::graph::BipartiteGraph;
    use crate::relay::{random_features, Backbone};

    fn block_original(users: usize, items: usize, dim: usize, seed: u64) -> OriginalSide {
        let g = BlockModel::new(users, items, 4, 0.35, 0.03).generate(seed).unwrap().to_graph();
        let x = random_features(g.num_nodes(), dim, seed);
        OriginalSide::new(g, x).unwrap()
    }

    fn config(dim: usize, backbone: Backbone) -> CondensationConfig {
        let relay = RelayConfig::new(backbone, 2, dim, 8).unwrap();
        let mut c = CondensationConfig::new(dim, relay);
        c.outer_epochs = 5;
        c.theta_samples = 2;
        c
    }

    #[test]
    fn sizes_follow_ratio() {
        let orig = block_original(10, 15, 8, 1);
        let mut cfg = config(8, Backbone::Gcn);
        cfg.alpha = 0.5;
        cfg.outer_epochs = 1;
        let (cg, report) = condense(&cfg, &orig).unwrap();
        assert_eq!((cg.num_users(), cg.num_items()), (5, 8));
        assert_eq!(report.len(), 1);
    }

    #[test]
    fn reported_objective_decomposes() {
        let orig = block_original(8, 10, 8, 2);
        let cfg = config(8, Backbone::Sage);
        let (_, report) = condense(&cfg, &orig).unwrap();
        assert_eq!(report.len(), cfg.outer_epochs);
        for r in report.records() {
            assert!((r.l_cond - (r.l_bip + cfg.beta * r.l_match)).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_config_gives_identical_report() {
        let orig = block_original(8, 10, 8, 3);
        let cfg = config(8, Backbone::Gat);
        let (a, ra) = condense(&cfg, &orig).unwrap();
        let (b, rb) = condense(&cfg, &orig).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epoch_copy_reproduces_edges() {
        let g = BipartiteGraph::from_edges(4, 6, [(0, 0), (0, 5), (1, 2), (2, 2), (3, 1), (3, 4)]).unwrap();
        let orig = OriginalSide::new(g.clone(), random_features(10, 16, 1)).unwrap();
        let mut cfg = config(16, Backbone::Gcn);
        cfg.alpha = 1.0;
        cfg.init = CondensedInit::Copy;
        cfg.outer_epochs = 0;
        let (cg, report) = condense(&cfg, &orig).unwrap();
        assert!(report.is_empty());
        assert_eq!(cg.to_bipartite(PairScope::AllPairs), g);
        assert_eq!(cg.intra_edge_count(PairScope::AllPairs), 0);
    }

    #[test]
    fn zero_beta_leaves_only_structure_gradient() {
        let orig = block_original(6, 8, 8, 4);
        let mut cfg = config(8, Backbone::Gcn);
        cfg.beta = 0.0;
        cfg.outer_epochs = 3;
        let (with_match, _) = condense(&cfg, &orig).unwrap();
        // the same run with a different matching strategy must coincide,
        // since the matching term is multiplied by zero
        cfg.strategy = Matching::Distribution;
        let (other, _) = condense(&cfg, &orig).unwrap();
        assert_eq!(with_match, other);
    }

    #[test]
    fn heavy_structure_penalty_makes_export_bipartite() {
        let orig = block_original(10, 12, 32, 5);
        let mut cfg = config(32, Backbone::Gcn);
        cfg.lambda = 10.0;
        cfg.beta = 0.0;
        cfg.outer_epochs = 200;
        cfg.lr_outer = 0.02;
        cfg.theta_samples = 1;
        let (cg, _) = condense(&cfg, &orig).unwrap();
        assert_eq!(cg.intra_edge_count(PairScope::AllPairs), 0);
    }

    #[test]
    fn divergence_returns_last_good_snapshot() {
        let orig = block_original(6, 8, 8, 6);
        let mut cfg = config(8, Backbone::Gcn);
        cfg.lr_outer = f64::MAX;
        cfg.outer_epochs = 3;
        match condense(&cfg, &orig) {
            Err(Error::Diverged { last_good, .. }) => assert!(last_good.is_finite()),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn invalid_settings_are_named() {
        let mut cfg = config(8, Backbone::Gcn);
        cfg.alpha = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "alpha"));
        let mut cfg = config(8, Backbone::Gcn);
        cfg.inner_steps = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "inner_steps"));
    }
}
