//! Turning chain trajectories into one configuration and one clustering.
//!
//! Each `(split, temperature)` chain yields its most visited configuration;
//! each split keeps the temperature preferred by AIC or BIC; the splits then
//! vote on the variables and average their cluster counts.

use std::collections::HashMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{
    fit_em, free_params, Clustering, Configuration, EmOptions, GmmModel, ParamCount, Shape,
};
use crate::mh::ChainTrajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Aic,
    Bic,
}

impl Criterion {
    /// `2 * NLL + c * |eta|` with `c = 1` for AIC and `c = ln n` for BIC.
    pub fn score(self, nll: f64, params: usize, n: usize) -> f64 {
        let penalty = match self {
            Criterion::Aic => 1.0,
            Criterion::Bic => (n as f64).ln(),
        };
        2.0 * nll + penalty * params as f64
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Aic => "aic",
            Criterion::Bic => "bic",
        })
    }
}

/// Outcome of one split.
#[derive(Debug, Clone)]
pub struct SplitResult {
    pub split_id: usize,
    /// Selected configuration for each temperature, in grid order.
    pub per_lambda: Vec<(f64, Configuration)>,
    pub lambda: f64,
    pub config: Configuration,
    /// Fit of `config` on the full sample.
    pub model: GmmModel,
    pub clustering: Clustering,
}

/// Most visited configuration among the last `window` post-pruning states.
/// Ties go to the configuration visited most recently.
pub fn select_configuration(trajectory: &ChainTrajectory, window: usize) -> Result<Configuration> {
    if trajectory.is_empty() {
        return Err(Error::Data("empty trajectory".into()));
    }
    if window == 0 {
        return Err(Error::Config("selection window must be positive".into()));
    }
    let start = trajectory.pruning_end.min(trajectory.len());
    let mut segment = &trajectory.states[start..];
    if segment.is_empty() {
        log::warn!(
            "split {}, lambda {}: chain never left the pruning phase; using its last states",
            trajectory.split_id,
            trajectory.lambda
        );
        segment = &trajectory.states[..];
    }
    if segment.len() < window {
        log::warn!(
            "split {}, lambda {}: only {} post-pruning states for a window of {window}",
            trajectory.split_id,
            trajectory.lambda,
            segment.len()
        );
    }
    let tail = &segment[segment.len().saturating_sub(window)..];
    let mut tally: HashMap<&Configuration, (usize, usize)> = HashMap::new();
    for (pos, s) in tail.iter().enumerate() {
        let e = tally.entry(&s.config).or_insert((0, 0));
        e.0 += 1;
        e.1 = pos;
    }
    let (best, _) = tally
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(a.1 .1.cmp(&b.1 .1)))
        .expect("non-empty tail");
    Ok(best.clone())
}

/// A temperature's candidate: its configuration and that configuration's fit
/// on the full sample.
#[derive(Debug, Clone)]
pub struct TemperatureCandidate {
    pub lambda: f64,
    pub config: Configuration,
    pub nll: f64,
}

/// Picks the temperature minimizing the information criterion; ties go to the
/// smaller temperature. Returns the index into `candidates`.
pub fn select_temperature(
    candidates: &[TemperatureCandidate],
    n: usize,
    criterion: Criterion,
    shape: Shape,
    count: ParamCount,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Config("empty temperature grid".into()));
    }
    let score = |c: &TemperatureCandidate| criterion.score(c.nll, free_params(&c.config, shape, count), n);
    let mut best = 0;
    for i in 1..candidates.len() {
        let (si, sb) = (score(&candidates[i]), score(&candidates[best]));
        if si < sb || (si == sb && candidates[i].lambda < candidates[best].lambda) {
            best = i;
        }
    }
    Ok(best)
}

/// Variable importance and voted configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Vote {
    pub config: Configuration,
    /// Fraction of splits in which each variable is active.
    pub importance: Vec<f64>,
}

/// A variable is kept when it is active in a strict majority of splits;
/// `K` is the mean cluster count rounded to the nearest integer, halves
/// rounded down.
pub fn majority_vote(configs: &[Configuration], d: usize) -> Result<Vote> {
    if configs.is_empty() {
        return Err(Error::Config("majority vote over zero splits".into()));
    }
    let b = configs.len();
    let mut counts = vec![0usize; d];
    for c in configs {
        for &j in &c.support {
            if j >= d {
                return Err(Error::DimensionMismatch { expected: d, found: j + 1 });
            }
            counts[j] += 1;
        }
    }
    let importance: Vec<f64> = counts.iter().map(|&c| c as f64 / b as f64).collect();
    let support: Vec<usize> = (0..d).filter(|&j| 2 * counts[j] > b).collect();
    let k_sum: usize = configs.iter().map(|c| c.k).sum();
    // ceil(mean - 1/2) in integers
    let k = ((2 * k_sum).saturating_sub(b) + 2 * b - 1) / (2 * b);
    Ok(Vote { config: Configuration::new(k.max(1), support), importance })
}

/// Number of splits in which each pair of observations shares a cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub splits: usize,
    counts: Vec<u32>,
}

impl SimilarityMatrix {
    pub fn from_clusterings(clusterings: &[Clustering]) -> Result<Self> {
        let Some(first) = clusterings.first() else {
            return Err(Error::Config("co-occurrence of zero clusterings".into()));
        };
        let n = first.len();
        if let Some(bad) = clusterings.iter().find(|c| c.len() != n) {
            return Err(Error::DimensionMismatch { expected: n, found: bad.len() });
        }
        let mut counts = vec![0u32; n * n];
        for c in clusterings {
            for i in 0..n {
                let li = c.labels[i];
                for j in 0..n {
                    if c.labels[j] == li {
                        counts[i * n + j] += 1;
                    }
                }
            }
        }
        Ok(Self { n, splits: clusterings.len(), counts })
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.counts[i * self.n + j]
    }
}

/// Average-linkage hierarchical clustering on `exp(-a_ij / B)`, cut at
/// `k_hat` clusters. Labels are numbered by first appearance.
pub fn aggregated_clustering(clusterings: &[Clustering], k_hat: usize) -> Result<Clustering> {
    let sim = SimilarityMatrix::from_clusterings(clusterings)?;
    let n = sim.n;
    if k_hat == 0 || k_hat > n {
        return Err(Error::Config(format!("cannot cut {n} observations into {k_hat} clusters")));
    }
    let b = sim.splits as f64;
    let mut condensed = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            condensed.push((-(sim.get(i, j) as f64) / b).exp());
        }
    }
    let dendrogram = kodama::linkage(&mut condensed, n, kodama::Method::Average);

    // Replay the first n - k_hat merges with a union-find over cluster ids.
    let mut parent: Vec<usize> = (0..2 * n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (step, s) in dendrogram.steps().iter().take(n - k_hat).enumerate() {
        let merged = n + step;
        let a = find(&mut parent, s.cluster1);
        let c = find(&mut parent, s.cluster2);
        parent[a] = merged;
        parent[c] = merged;
    }
    let mut ids: HashMap<usize, usize> = HashMap::new();
    let labels = (0..n)
        .map(|i| {
            let root = find(&mut parent, i);
            let next = ids.len();
            *ids.entry(root).or_insert(next)
        })
        .collect();
    Ok(Clustering::new(labels, k_hat))
}

/// Fits `config` on the whole sample and assigns every observation by MAP.
pub fn final_fit(
    data: ArrayView2<'_, f64>,
    config: &Configuration,
    shape: Shape,
    em: &EmOptions,
) -> Result<(GmmModel, Clustering)> {
    let model = fit_em(data, config, shape, em)?;
    let clustering = model.map_clustering(data)?;
    Ok((model, clustering))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ari;
    use crate::mh::{MoveKind, TrajectoryStep};

    fn traj(configs: &[Configuration], pruning_end: usize) -> ChainTrajectory {
        ChainTrajectory {
            states: configs
                .iter()
                .enumerate()
                .map(|(i, c)| TrajectoryStep {
                    step: i,
                    config: c.clone(),
                    nll_x1: 0.0,
                    accepted: true,
                    kind: MoveKind::Add,
                })
                .collect(),
            pruning_end,
            seed: 0,
            lambda: 1.0,
            split_id: 0,
        }
    }

    fn cfg(k: usize, s: &[usize]) -> Configuration {
        Configuration::new(k, s.to_vec())
    }

    #[test]
    fn mode_of_tail() {
        let a = cfg(2, &[0, 1]);
        let b = cfg(3, &[0]);
        let all_a = traj(&vec![a.clone(); 150], 0);
        assert_eq!(select_configuration(&all_a, 100).unwrap(), a);

        let mut states = vec![b.clone(); 60];
        states.extend(vec![a.clone(); 60]);
        states.extend(vec![b.clone(); 40]);
        // last 100: 60 a then 40 b
        assert_eq!(select_configuration(&traj(&states, 0), 100).unwrap(), a);

        let mut tie = vec![a.clone(); 50];
        tie.extend(vec![b.clone(); 50]);
        assert_eq!(select_configuration(&traj(&tie, 0), 100).unwrap(), b);
        let mut tie2 = vec![b.clone(); 50];
        tie2.extend(vec![a.clone(); 50]);
        assert_eq!(select_configuration(&traj(&tie2, 0), 100).unwrap(), a);
    }

    #[test]
    fn selection_ignores_pruning_and_prefix() {
        let a = cfg(2, &[0]);
        let b = cfg(2, &[1]);
        let mut states = vec![b.clone(); 30];
        states.extend(vec![a.clone(); 20]);
        assert_eq!(select_configuration(&traj(&states, 30), 100).unwrap(), a);

        let mut other_prefix = vec![cfg(5, &[4]); 30];
        other_prefix.extend(vec![a.clone(); 20]);
        assert_eq!(
            select_configuration(&traj(&other_prefix, 30), 100).unwrap(),
            select_configuration(&traj(&states, 30), 100).unwrap()
        );
    }

    #[test]
    fn temperature_choice() {
        let c = cfg(2, &[0, 1]);
        let single = [TemperatureCandidate { lambda: 3.0, config: c.clone(), nll: 10.0 }];
        assert_eq!(select_temperature(&single, 50, Criterion::Bic, Shape::Lb, ParamCount::Direct).unwrap(), 0);

        let same = [
            TemperatureCandidate { lambda: 5.0, config: c.clone(), nll: 10.0 },
            TemperatureCandidate { lambda: 2.0, config: c.clone(), nll: 10.0 },
        ];
        assert_eq!(select_temperature(&same, 50, Criterion::Aic, Shape::Lb, ParamCount::Direct).unwrap(), 1);

        // larger model: 3 extra parameters ((K-1) + K|S| + |S| grows from 5 to 8)
        // and 2 * NLL improves by 2 * 5 = 10 < ln(100) * 3 = 13.8, so BIC
        // keeps the smaller model while AIC (penalty 3) takes the larger one.
        let nested = [
            TemperatureCandidate { lambda: 1.0, config: cfg(2, &[0, 1, 2]), nll: 95.0 },
            TemperatureCandidate { lambda: 2.0, config: cfg(2, &[0, 1]), nll: 100.0 },
        ];
        assert_eq!(select_temperature(&nested, 100, Criterion::Bic, Shape::Lb, ParamCount::Direct).unwrap(), 1);
        assert_eq!(select_temperature(&nested, 100, Criterion::Aic, Shape::Lb, ParamCount::Direct).unwrap(), 0);
        assert!(select_temperature(&[], 10, Criterion::Bic, Shape::Lb, ParamCount::Direct).is_err());
    }

    #[test]
    fn voting_rules() {
        let c = cfg(2, &[0, 3]);
        let v = majority_vote(&[c.clone(), c.clone(), c.clone()], 5).unwrap();
        assert_eq!(v.config, c);
        assert_eq!(v.importance, vec![1.0, 0.0, 0.0, 1.0, 0.0]);

        let v = majority_vote(&[cfg(2, &[]), cfg(2, &[]), cfg(3, &[])], 2).unwrap();
        assert_eq!(v.config.k, 2);
        let v = majority_vote(&[cfg(2, &[]), cfg(3, &[])], 2).unwrap();
        assert_eq!(v.config.k, 2);
        let v = majority_vote(&[cfg(3, &[]), cfg(3, &[]), cfg(2, &[])], 2).unwrap();
        assert_eq!(v.config.k, 3);

        let mut half: Vec<Configuration> = vec![cfg(2, &[1]); 10];
        half.extend(vec![cfg(2, &[]); 10]);
        let v = majority_vote(&half, 3).unwrap();
        assert!(!v.config.contains(1));
        assert_eq!(v.importance[1], 0.5);
    }

    #[test]
    fn co_occurrence_matrix() {
        let a = Clustering::new(vec![0, 0, 1], 2);
        let b = Clustering::new(vec![1, 0, 0], 2);
        let s = SimilarityMatrix::from_clusterings(&[a, b]).unwrap();
        for i in 0..3 {
            assert_eq!(s.get(i, i), 2);
            for j in 0..3 {
                assert_eq!(s.get(i, j), s.get(j, i));
            }
        }
        assert_eq!(s.get(0, 1), 1);
        assert_eq!(s.get(1, 2), 1);
        assert_eq!(s.get(0, 2), 0);
    }

    #[test]
    fn aggregation_recovers_consensus() {
        let base = Clustering::new(vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 2], 3);
        let agg = aggregated_clustering(&vec![base.clone(); 4], 3).unwrap();
        assert_eq!(ari(&agg, &base).unwrap(), 1.0);
        let one = aggregated_clustering(&vec![base.clone(); 4], 1).unwrap();
        assert!(one.labels.iter().all(|&l| l == 0));
        assert!(aggregated_clustering(&[base], 11).is_err());
    }

    #[test]
    fn nine_points_two_clusterings() {
        // Both clusterings agree on {0,1,2}, {3,4,5}, {6,7,8}; the second one
        // additionally merges the last two blocks. Within-block distance is
        // e^{-1}, between the last two blocks e^{-1/2}, elsewhere 1, so
        // average linkage merges the blocks first and stops at three.
        let first = Clustering::new(vec![0, 0, 0, 1, 1, 1, 2, 2, 2], 3);
        let second = Clustering::new(vec![0, 0, 0, 1, 1, 1, 1, 1, 1], 2);
        let agg = aggregated_clustering(&[first.clone(), second], 3).unwrap();
        assert_eq!(ari(&agg, &first).unwrap(), 1.0);
    }
}
