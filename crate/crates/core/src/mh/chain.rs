//! Chain execution and the per-split configuration cache.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::{
    acceptance_log_ratio, between_variance, kmeans, log_kernel, propose, prune_step,
    BetweenVariance, KernelParams, MoveKind,
};
use crate::error::{Error, Result};
use crate::gmm::{fit_em, Clustering, Configuration, EmOptions, GmmModel, Shape};
use crate::math::{derive_seed, rng_from};
use crate::prior::Prior;

/// A configuration together with everything the sampler needs about it:
/// the fit on the estimation sample, its negative log-likelihood on the
/// learning sample, the MAP clustering of the full sample and the
/// between-variances of that clustering.
#[derive(Debug, Clone)]
pub struct EvaluatedState {
    pub config: Configuration,
    pub model: GmmModel,
    pub clustering: Clustering,
    pub nll_x1: f64,
    pub between: BetweenVariance,
}

type CacheEntry = std::result::Result<Arc<EvaluatedState>, String>;

/// Evaluates configurations for one split and memoizes the results.
///
/// The EM seed of a configuration is derived from the configuration itself,
/// so an evaluation is a pure function of `(data, split, config)`. Chains at
/// different temperatures on the same split can therefore share one cache
/// without affecting each other's trajectories.
pub struct Evaluator<'a> {
    learn: Array2<f64>,
    estimate: Array2<f64>,
    full: ArrayView2<'a, f64>,
    shape: Shape,
    em: EmOptions,
    cache: Mutex<HashMap<Configuration, CacheEntry>>,
    initial: Mutex<HashMap<usize, Configuration>>,
    fits: AtomicUsize,
}

impl<'a> Evaluator<'a> {
    /// `em.seed` is the base seed from which per-configuration EM seeds are
    /// derived.
    pub fn new(
        full: ArrayView2<'a, f64>,
        learn_indices: &[usize],
        estimate_indices: &[usize],
        shape: Shape,
        em: EmOptions,
    ) -> Result<Self> {
        if learn_indices.is_empty() || estimate_indices.is_empty() {
            return Err(Error::Config("both split parts must be non-empty".into()));
        }
        let n = full.nrows();
        if learn_indices.iter().chain(estimate_indices).any(|&i| i >= n) {
            return Err(Error::Data("split index outside the data".into()));
        }
        Ok(Self {
            learn: full.select(ndarray::Axis(0), learn_indices),
            estimate: full.select(ndarray::Axis(0), estimate_indices),
            full,
            shape,
            em,
            cache: Mutex::new(HashMap::new()),
            initial: Mutex::new(HashMap::new()),
            fits: AtomicUsize::new(0),
        })
    }

    pub fn d(&self) -> usize {
        self.full.ncols()
    }

    pub fn full(&self) -> ArrayView2<'a, f64> {
        self.full
    }

    pub fn estimate_len(&self) -> usize {
        self.estimate.nrows()
    }

    /// Number of EM fits run so far.
    pub fn fit_count(&self) -> usize {
        self.fits.load(Ordering::Relaxed)
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    fn config_seed(&self, config: &Configuration) -> u64 {
        let mut stream = Vec::with_capacity(config.size() + 1);
        stream.push(config.k as u64);
        stream.extend(config.support.iter().map(|&j| j as u64 + 1));
        derive_seed(self.em.seed, &stream)
    }

    pub fn evaluate(&self, config: &Configuration) -> Result<Arc<EvaluatedState>> {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(config) {
            return hit.clone().map_err(Error::Numerical);
        }
        let entry = self.compute(config).map(Arc::new).map_err(|e| e.to_string());
        let mut cache = self.cache.lock().expect("cache lock");
        let stored = cache.entry(config.clone()).or_insert(entry);
        stored.clone().map_err(Error::Numerical)
    }

    fn compute(&self, config: &Configuration) -> Result<EvaluatedState> {
        self.fits.fetch_add(1, Ordering::Relaxed);
        let opts = EmOptions { seed: self.config_seed(config), ..self.em.clone() };
        let model = fit_em(self.estimate.view(), config, self.shape, &opts)?;
        let nll_x1 = model.neg_log_likelihood(self.learn.view())?;
        let clustering = model.map_clustering(self.full)?;
        let between = between_variance(&clustering, self.full)?;
        Ok(EvaluatedState { config: config.clone(), model, clustering, nll_x1, between })
    }

    /// Starting configuration of every chain with `k0` clusters.
    pub fn initial_configuration(&self, k0: usize) -> Result<Configuration> {
        if let Some(c) = self.initial.lock().expect("init lock").get(&k0) {
            return Ok(c.clone());
        }
        let c = initial_support(self.full, k0, derive_seed(self.em.seed, &[0x1417]))?;
        self.initial.lock().expect("init lock").insert(k0, c.clone());
        Ok(c)
    }
}

/// Starting support: every variable when `n <= d`; otherwise the `n`
/// variables (capped at `d`) with the largest between-variance under a
/// k-means clustering with `k0` groups.
pub fn initial_support(data: ArrayView2<'_, f64>, k0: usize, seed: u64) -> Result<Configuration> {
    let (n, d) = data.dim();
    if k0 == 0 {
        return Err(Error::Config("K0 must be at least 1".into()));
    }
    if n <= d {
        return Ok(Configuration::full(k0, d));
    }
    let clustering = kmeans(data, k0, seed)?;
    let between = between_variance(&clustering, data)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| between.per_variable[b].total_cmp(&between.per_variable[a]).then(a.cmp(&b)));
    order.truncate(n.min(d));
    Ok(Configuration::new(k0, order))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOptions {
    pub k0: usize,
    pub k_max: usize,
    pub steps: usize,
    /// Run the batch-removal phase first.
    pub prune: bool,
    /// Support size that ends the batch-removal phase; `ceil(d/3)` if unset.
    pub prune_target: Option<usize>,
}

impl Default for ChainOptions {
    fn default() -> Self {
        Self { k0: 2, k_max: 10, steps: 300, prune: true, prune_target: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub step: usize,
    /// Chain state after this step.
    pub config: Configuration,
    pub nll_x1: f64,
    pub accepted: bool,
    /// Kind of the move proposed at this step.
    pub kind: MoveKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrajectory {
    pub states: Vec<TrajectoryStep>,
    /// States before this index belong to the batch-removal phase.
    pub pruning_end: usize,
    pub seed: u64,
    pub lambda: f64,
    pub split_id: usize,
}

impl ChainTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        let moves = &self.states[self.pruning_end.min(self.states.len())..];
        let proposed = moves.iter().filter(|s| s.kind != MoveKind::Init).count();
        if proposed == 0 {
            return 0.0;
        }
        moves.iter().filter(|s| s.kind != MoveKind::Init && s.accepted).count() as f64 / proposed as f64
    }

    /// CSV with columns `step,K,S,nll_X1,accepted,move_kind`; `S` lists
    /// 1-based indices joined by semicolons.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "step,K,S,nll_X1,accepted,move_kind")?;
        for s in &self.states {
            let support: Vec<String> = s.config.support_one_based().iter().map(|j| j.to_string()).collect();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                s.step,
                s.config.k,
                support.join(";"),
                s.nll_x1,
                s.accepted,
                s.kind.as_str()
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs one chain at temperature `lambda`. The trajectory has exactly
/// `options.steps` entries, the first being the initial state.
pub fn run_chain(
    evaluator: &Evaluator<'_>,
    prior: &Prior,
    lambda: f64,
    options: &ChainOptions,
    seed: u64,
    split_id: usize,
) -> Result<ChainTrajectory> {
    if options.steps == 0 {
        return Err(Error::Config("a chain needs at least one step".into()));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {lambda}")));
    }
    let d = evaluator.d();
    let k_max = options.k_max.min(evaluator.estimate_len()).min(prior.params().k_max);
    if options.k0 == 0 || options.k0 > k_max {
        return Err(Error::Config(format!("K0 = {} outside 1..={k_max}", options.k0)));
    }
    let params = KernelParams { k_max, d };
    let target = options.prune_target.unwrap_or(d.div_ceil(3));
    let mut rng = rng_from(seed, &[]);

    let init = evaluator.initial_configuration(options.k0)?;
    let mut current = evaluator.evaluate(&init)?;
    let mut states = Vec::with_capacity(options.steps);
    states.push(TrajectoryStep {
        step: 0,
        config: current.config.clone(),
        nll_x1: current.nll_x1,
        accepted: true,
        kind: MoveKind::Init,
    });
    let mut pruning = options.prune && current.config.size() > target;
    let mut pruning_end = if pruning { options.steps } else { 0 };

    for step in 1..options.steps {
        let (accepted, kind) = if pruning {
            let proposal = prune_step(&current.config, &current.between, target, &mut rng);
            match evaluator.evaluate(&proposal.config) {
                Ok(next) => {
                    current = next;
                    (true, MoveKind::Prune)
                }
                Err(e) => {
                    log::warn!("split {split_id}, lambda {lambda}: rejecting {}: {e}", proposal.config);
                    (false, MoveKind::Prune)
                }
            }
        } else {
            let proposal = propose(&current.config, &current.between, &mut rng, &params);
            match evaluator.evaluate(&proposal.config) {
                Ok(next) => {
                    let log_bwd = log_kernel(&next.config, &next.between, &current.config, &params);
                    let log_r = acceptance_log_ratio(&current, &next, lambda, proposal.log_fwd, log_bwd, prior);
                    let u: f64 = rng.random();
                    let accept = log_r >= 0.0 || u <= log_r.exp();
                    if accept {
                        current = next;
                    }
                    (accept, proposal.kind)
                }
                Err(e) => {
                    log::warn!("split {split_id}, lambda {lambda}: rejecting {}: {e}", proposal.config);
                    (false, proposal.kind)
                }
            }
        };
        states.push(TrajectoryStep {
            step,
            config: current.config.clone(),
            nll_x1: current.nll_x1,
            accepted,
            kind,
        });
        if pruning && current.config.size() <= target {
            pruning = false;
            pruning_end = step + 1;
        }
    }
    Ok(ChainTrajectory { states, pruning_end: pruning_end.min(options.steps), seed, lambda, split_id })
}
