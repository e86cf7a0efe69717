//! End-to-end runs: splits, chains over the temperature grid, post-treatment
//! and the replication harness over the simulated settings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    aggregated_clustering, final_fit, majority_vote, select_configuration, select_temperature,
    Criterion, SplitResult, TemperatureCandidate,
};
use crate::data::{self, standardize, Dataset, ExperimentId, MixtureSpec};
use crate::error::{Error, Result};
use crate::eval::ari;
use crate::gmm::{fit_em, Clustering, Configuration, EmOptions, GmmModel, ParamCount, Shape};
use crate::math::derive_seed;
use crate::mh::{run_chain, ChainOptions, ChainTrajectory, Evaluator};
use crate::prior::{Prior, PriorParams};

pub const DEFAULT_LAMBDAS: [f64; 9] = [1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 50.0, 75.0, 100.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ClusteringMode {
    /// Refit the voted configuration on the whole sample and assign by MAP.
    #[default]
    Direct,
    /// Hierarchical clustering of the across-split co-occurrences.
    Aggregated,
}

/// Everything a run depends on. Unset fields in a configuration file take
/// the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// CSV input; ignored when `simulate` is set.
    pub input: Option<PathBuf>,
    pub has_header: bool,
    /// The last CSV column holds ground-truth labels.
    pub has_labels: bool,
    pub simulate: Option<ExperimentId>,
    pub splits: usize,
    pub lambdas: Vec<f64>,
    pub steps: usize,
    pub k0: usize,
    pub k_max: usize,
    pub criterion: Criterion,
    pub prune_target: Option<usize>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub mode: ClusteringMode,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
    /// Fraction of observations in the learning part of each split.
    pub split_fraction: f64,
    /// Trailing states used to pick each chain's configuration.
    pub window: usize,
    pub em_starts: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            has_header: true,
            has_labels: false,
            simulate: None,
            splits: 20,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            steps: 300,
            k0: 2,
            k_max: 10,
            criterion: Criterion::Bic,
            prune_target: None,
            seed: 0,
            out_dir: None,
            mode: ClusteringMode::Direct,
            jobs: 0,
            split_fraction: 0.5,
            window: 100,
            em_starts: 3,
        }
    }
}

impl RunConfig {
    /// Checks the settings that do not concern the data source.
    pub fn validate_settings(&self) -> Result<()> {
        if self.splits == 0 {
            return Err(Error::Config("need at least one split".into()));
        }
        if self.lambdas.is_empty() {
            return Err(Error::Config("temperature grid is empty".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!("temperatures must be positive, got {l}")));
        }
        if self.steps == 0 {
            return Err(Error::Config("chains need at least one step".into()));
        }
        if self.k0 == 0 || self.k0 > self.k_max {
            return Err(Error::Config(format!("K0 = {} outside 1..={}", self.k0, self.k_max)));
        }
        if self.window == 0 || self.em_starts == 0 {
            return Err(Error::Config("window and em_starts must be positive".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_settings()?;
        if self.simulate.is_none() && self.input.is_none() {
            return Err(Error::Config("either an input file or a simulated setting is required".into()));
        }
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn em_options(&self, seed: u64) -> EmOptions {
        EmOptions { n_starts: self.em_starts, seed, ..EmOptions::default() }
    }

    /// Reads or simulates the raw dataset.
    pub fn load_data(&self) -> Result<Dataset> {
        match (self.simulate, &self.input) {
            (Some(id), _) => data::simulate_raw(&MixtureSpec::for_experiment(id), derive_seed(self.seed, &[0xda7a])),
            (None, Some(path)) => Dataset::from_csv(path, self.has_header, self.has_labels),
            (None, None) => Err(Error::Config("no input".into())),
        }
    }
}

/// `{K, S}` with 1-based variable indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDoc {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "S")]
    pub s: Vec<usize>,
}

impl From<&Configuration> for ConfigDoc {
    fn from(c: &Configuration) -> Self {
        Self { k: c.k, s: c.support_one_based() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDoc {
    pub b: usize,
    pub lambda: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "S")]
    pub s: Vec<usize>,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub eta_hat: ConfigDoc,
    pub importance: Vec<f64>,
    pub per_split: Vec<SplitDoc>,
    pub chosen_by: Criterion,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub n: usize,
    pub d: usize,
    pub mode: ClusteringMode,
    pub cluster_sizes: Vec<usize>,
    pub ari_direct: Option<f64>,
    pub ari_aggregated: Option<f64>,
    pub em_fits: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub report: ReportDoc,
    pub metrics: MetricsDoc,
    pub eta_hat: Configuration,
    pub splits: Vec<SplitResult>,
    pub trajectories: Vec<ChainTrajectory>,
    pub model: GmmModel,
    pub direct: Clustering,
    pub aggregated: Option<Clustering>,
}

impl PipelineReport {
    /// Clustering selected by the run's mode.
    pub fn clustering(&self) -> &Clustering {
        match (&self.aggregated, self.metrics.mode) {
            (Some(a), ClusteringMode::Aggregated) => a,
            _ => &self.direct,
        }
    }

    pub fn report_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.report)?)
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs the whole method on `raw` (standardized here).
pub fn run_on_dataset(config: &RunConfig, raw: &Dataset) -> Result<PipelineReport> {
    config.validate_settings()?;
    thread_pool(config.jobs)?.install(|| run_inner(config, raw))
}

/// Loads the data named by `config`, runs the method and writes the outputs
/// when an output directory is set.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineReport> {
    config.validate()?;
    let raw = config.load_data()?;
    let report = run_on_dataset(config, &raw)?;
    if let Some(dir) = &config.out_dir {
        write_outputs(dir, &raw, &report)?;
    }
    Ok(report)
}

fn run_inner(config: &RunConfig, raw: &Dataset) -> Result<PipelineReport> {
    let ds = standardize(raw);
    let (n, d) = (ds.n(), ds.d());
    let x = ds.values.view();
    let prior = Prior::new(PriorParams::new(d, config.k_max))?;
    let chain_opts = ChainOptions {
        k0: config.k0,
        k_max: config.k_max,
        steps: config.steps,
        prune: true,
        prune_target: config.prune_target,
    };

    let evaluators = (0..config.splits)
        .map(|b| {
            let sp = data::split(n, config.split_fraction, derive_seed(config.seed, &[b as u64, 1]))?;
            let em = config.em_options(derive_seed(config.seed, &[b as u64, 2]));
            Evaluator::new(x, &sp.learn_indices, &sp.estimate_indices, Shape::Lb, em)
        })
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = (0..config.splits)
        .flat_map(|b| (0..config.lambdas.len()).map(move |l| (b, l)))
        .collect();
    let trajectories = jobs
        .par_iter()
        .map(|&(b, l)| {
            let seed = derive_seed(config.seed, &[b as u64, 3, l as u64]);
            run_chain(&evaluators[b], &prior, config.lambdas[l], &chain_opts, seed, b)
        })
        .collect::<Result<Vec<_>>>()?;
    let em_fits: usize = evaluators.iter().map(Evaluator::fit_count).sum();
    drop(evaluators);

    let selected = trajectories
        .iter()
        .map(|t| select_configuration(t, config.window))
        .collect::<Result<Vec<_>>>()?;

    // One fit on the full sample per distinct selected configuration.
    let distinct: Vec<Configuration> = selected.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let fits = distinct
        .par_iter()
        .map(|c| {
            let em = config.em_options(config_seed(derive_seed(config.seed, &[4]), c));
            let model = fit_em(x, c, Shape::Lb, &em)?;
            let nll = model.neg_log_likelihood(x)?;
            Ok((c.clone(), (model, nll)))
        })
        .collect::<Result<HashMap<_, _>>>()?;

    let n_l = config.lambdas.len();
    let mut splits = Vec::with_capacity(config.splits);
    for b in 0..config.splits {
        let per_lambda: Vec<(f64, Configuration)> = (0..n_l)
            .map(|l| (config.lambdas[l], selected[b * n_l + l].clone()))
            .collect();
        let candidates: Vec<TemperatureCandidate> = per_lambda
            .iter()
            .map(|(lambda, c)| TemperatureCandidate { lambda: *lambda, config: c.clone(), nll: fits[c].1 })
            .collect();
        let best = select_temperature(&candidates, n, config.criterion, Shape::Lb, ParamCount::Direct)?;
        let chosen = candidates[best].config.clone();
        let model = fits[&chosen].0.clone();
        let clustering = model.map_clustering(x)?;
        splits.push(SplitResult {
            split_id: b,
            lambda: candidates[best].lambda,
            config: chosen,
            per_lambda,
            model,
            clustering,
        });
    }

    let configs: Vec<Configuration> = splits.iter().map(|s| s.config.clone()).collect();
    let vote = majority_vote(&configs, d)?;
    let eta_hat = vote.config.clone();
    let (model, direct) = final_fit(x, &eta_hat, Shape::Lb, &config.em_options(derive_seed(config.seed, &[5])))?;
    let aggregated = match config.mode {
        ClusteringMode::Aggregated => {
            let parts: Vec<Clustering> = splits.iter().map(|s| s.clustering.clone()).collect();
            Some(aggregated_clustering(&parts, eta_hat.k.min(n))?)
        }
        ClusteringMode::Direct => None,
    };

    let truth = raw.labels.as_ref().map(|l| {
        let k = l.iter().max().map_or(1, |m| m + 1);
        Clustering::new(l.clone(), k)
    });
    let ari_direct = truth.as_ref().map(|t| ari(&direct, t)).transpose()?;
    let ari_aggregated = match (&truth, &aggregated) {
        (Some(t), Some(a)) => Some(ari(a, t)?),
        _ => None,
    };
    let chosen = match &aggregated {
        Some(a) => a,
        None => &direct,
    };

    let report = ReportDoc {
        eta_hat: (&eta_hat).into(),
        importance: vote.importance,
        per_split: splits
            .iter()
            .map(|s| SplitDoc { b: s.split_id + 1, lambda: s.lambda, k: s.config.k, s: s.config.support_one_based() })
            .collect(),
        chosen_by: config.criterion,
    };
    let metrics = MetricsDoc {
        n,
        d,
        mode: config.mode,
        cluster_sizes: chosen.sizes(),
        ari_direct,
        ari_aggregated,
        em_fits,
    };
    log::info!("eta_hat = {eta_hat}; {em_fits} EM fits across {} chains", trajectories.len());
    Ok(PipelineReport { report, metrics, eta_hat, splits, trajectories, model, direct, aggregated })
}

fn config_seed(base: u64, c: &Configuration) -> u64 {
    let mut stream = vec![c.k as u64];
    stream.extend(c.support.iter().map(|&j| j as u64 + 1));
    derive_seed(base, &stream)
}

/// Writes `report.json`, `metrics.json`, `model.json`, `importance.csv`,
/// `clusters.csv` and one trajectory CSV per chain under `dir`.
pub fn write_outputs(dir: &Path, raw: &Dataset, report: &PipelineReport) -> Result<()> {
    fs::create_dir_all(dir.join("trajectories"))?;
    fs::write(dir.join("report.json"), report.report_json()? + "\n")?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report.metrics)? + "\n")?;
    fs::write(dir.join("model.json"), report.model.to_json()? + "\n")?;
    let mut imp = String::from("variable,importance\n");
    for (j, v) in report.report.importance.iter().enumerate() {
        imp.push_str(&format!("{},{v}\n", j + 1));
    }
    fs::write(dir.join("importance.csv"), imp)?;
    raw.write_csv_with_clusters(&dir.join("clusters.csv"), &report.clustering().labels)?;
    for t in &report.trajectories {
        t.write_csv(&dir.join("trajectories").join(format!("split{:02}_lambda{}.csv", t.split_id + 1, t.lambda)))?;
    }
    Ok(())
}

/// One replication of a simulated setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub replication: usize,
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: usize,
    pub true_active: usize,
    pub false_active: usize,
    pub true_nonactive: usize,
    pub false_nonactive: usize,
    pub ari: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub experiment: ExperimentId,
    pub n_active: usize,
    pub true_k: usize,
    pub rows: Vec<ReplicationRow>,
    /// Number of replications selecting each `K`.
    pub k_histogram: BTreeMap<usize, usize>,
    pub mean_true_active: f64,
    pub mean_false_active: f64,
    pub mean_ari: f64,
    pub sd_ari: f64,
}

impl ExperimentTable {
    pub fn k_count(&self, k: usize) -> usize {
        self.k_histogram.get(&k).copied().unwrap_or(0)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Simulates `replications` datasets of one setting and runs the method on
/// each. `base` supplies everything except the data and the seed.
pub fn run_experiment(
    id: ExperimentId,
    replications: usize,
    seed: u64,
    base: &RunConfig,
) -> Result<ExperimentTable> {
    if replications == 0 {
        return Err(Error::Config("need at least one replication".into()));
    }
    let spec = MixtureSpec::for_experiment(id);
    let active = spec.n_active();
    let mut rows = Vec::with_capacity(replications);
    for r in 0..replications {
        let rep_seed = derive_seed(seed, &[r as u64]);
        let raw = data::simulate_raw(&spec, derive_seed(rep_seed, &[0xda7a]))?;
        let cfg = RunConfig { seed: rep_seed, simulate: Some(id), out_dir: None, ..base.clone() };
        let out = run_on_dataset(&cfg, &raw)?;
        let s = &out.eta_hat;
        let true_active = s.support.iter().filter(|&&j| j < active).count();
        let false_active = s.size() - true_active;
        let row = ReplicationRow {
            replication: r + 1,
            seed: rep_seed,
            k: s.k,
            true_active,
            false_active,
            true_nonactive: spec.d - active - false_active,
            false_nonactive: active - true_active,
            ari: out.metrics.ari_direct.unwrap_or(f64::NAN),
        };
        log::info!("{id} replication {}: {row:?}", r + 1);
        rows.push(row);
    }
    let m = rows.len() as f64;
    let mut k_histogram = BTreeMap::new();
    for r in &rows {
        *k_histogram.entry(r.k).or_insert(0) += 1;
    }
    let mean_ari = rows.iter().map(|r| r.ari).sum::<f64>() / m;
    let sd_ari = if rows.len() > 1 {
        (rows.iter().map(|r| (r.ari - mean_ari).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(ExperimentTable {
        experiment: id,
        n_active: active,
        true_k: spec.sizes.len(),
        k_histogram,
        mean_true_active: rows.iter().map(|r| r.true_active as f64).sum::<f64>() / m,
        mean_false_active: rows.iter().map(|r| r.false_active as f64).sum::<f64>() / m,
        mean_ari,
        sd_ari,
        rows,
    })
}
