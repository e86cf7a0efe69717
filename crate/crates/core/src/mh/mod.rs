//! Metropolis-Hastings exploration of configurations `(K, S)`.
//!
//! The proposal changes either the number of clusters or, when `K` stays
//! put, adds or removes one variable. Variables are added with probability
//! proportional to their between-cluster variance under the current MAP
//! clustering and removed proportionally to its inverse, so the chain
//! concentrates quickly on variables that explain the clustering.

pub mod chain;
pub mod kmeans;

use ndarray::ArrayView2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{Clustering, Configuration};
use crate::prior::Prior;

pub use chain::{
    initial_support, run_chain, ChainOptions, ChainTrajectory, EvaluatedState, Evaluator,
    TrajectoryStep,
};
pub use kmeans::{kmeans, kmeans_with, KMeansOptions};

/// Added to between-variances before inverting them.
pub const INVERSE_VARB_EPS: f64 = 1e-12;

/// Between-cluster variance of each variable and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct BetweenVariance {
    pub per_variable: Vec<f64>,
    pub total: f64,
}

/// `varb(C, j) = (1/n) sum_k n_k (G_kj - G_j)^2` for every variable `j`.
pub fn between_variance(clustering: &Clustering, data: ArrayView2<'_, f64>) -> Result<BetweenVariance> {
    let (n, d) = data.dim();
    if clustering.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: clustering.len() });
    }
    let k = clustering.k;
    let mut sums = vec![0.0; k * d];
    let mut global = vec![0.0; d];
    for (x, &l) in data.outer_iter().zip(&clustering.labels) {
        if l >= k {
            return Err(Error::Data(format!("label {l} outside 0..{k}")));
        }
        let row = &mut sums[l * d..(l + 1) * d];
        for ((s, g), &v) in row.iter_mut().zip(global.iter_mut()).zip(x.iter()) {
            *s += v;
            *g += v;
        }
    }
    let nf = n as f64;
    global.iter_mut().for_each(|g| *g /= nf);
    let sizes = clustering.sizes();
    let mut per_variable = vec![0.0; d];
    for (c, &size) in sizes.iter().enumerate() {
        if size == 0 {
            continue;
        }
        let nk = size as f64;
        for j in 0..d {
            let diff = sums[c * d + j] / nk - global[j];
            per_variable[j] += nk * diff * diff;
        }
    }
    per_variable.iter_mut().for_each(|v| *v /= nf);
    let total = per_variable.iter().sum();
    Ok(BetweenVariance { per_variable, total })
}

/// Kind of move recorded in a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoveKind {
    Init,
    #[serde(rename = "k_move")]
    KMove,
    Add,
    Remove,
    Prune,
}

impl MoveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MoveKind::Init => "init",
            MoveKind::KMove => "k_move",
            MoveKind::Add => "add",
            MoveKind::Remove => "remove",
            MoveKind::Prune => "prune",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub config: Configuration,
    pub kind: MoveKind,
    /// `ln W(current, proposed)`; zero for pruning moves, which are not
    /// corrected.
    pub log_fwd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelParams {
    pub k_max: usize,
    pub d: usize,
}

/// Distribution of the next cluster count.
pub fn k_move_probs(k: usize, k_max: usize) -> Vec<(usize, f64)> {
    if k_max <= 1 {
        return vec![(1, 1.0)];
    }
    if k <= 1 {
        vec![(1, 0.5), (2, 0.5)]
    } else if k >= k_max {
        vec![(k_max - 1, 0.5), (k_max, 0.5)]
    } else {
        vec![(k - 1, 0.25), (k, 0.5), (k + 1, 0.25)]
    }
}

/// Probability of adding (rather than removing) a variable when `K` is kept.
fn add_probability(s: usize, d: usize) -> f64 {
    if s == 0 {
        1.0
    } else if s >= d {
        0.0
    } else {
        0.5
    }
}

/// Weights used to pick an added variable (`j` outside `S`) or a removed one
/// (`j` in `S`). Returns `(candidates, normalized probabilities)`.
fn candidate_probs(
    config: &Configuration,
    between: &BetweenVariance,
    adding: bool,
) -> (Vec<usize>, Vec<f64>) {
    let d = between.per_variable.len();
    let mask = config.mask(d);
    let candidates: Vec<usize> = (0..d).filter(|&j| mask[j] != adding).collect();
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&j| {
            let v = between.per_variable[j].max(0.0);
            if adding {
                v
            } else {
                1.0 / (v + INVERSE_VARB_EPS)
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let probs = if total > 0.0 && total.is_finite() {
        weights.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / candidates.len() as f64; candidates.len()]
    };
    (candidates, probs)
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let mut u: f64 = rng.random();
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    // rounding: fall back to the last candidate with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// `ln W(from, to)`, or `-inf` when `to` is not reachable in one move.
/// `between` is the between-variance of the MAP clustering at `from`.
pub fn log_kernel(
    from: &Configuration,
    between: &BetweenVariance,
    to: &Configuration,
    params: &KernelParams,
) -> f64 {
    let h = k_move_probs(from.k, params.k_max)
        .into_iter()
        .find(|&(k, _)| k == to.k)
        .map(|(_, p)| p);
    let Some(h) = h else {
        return f64::NEG_INFINITY;
    };
    if to.k != from.k {
        return if to.support == from.support { h.ln() } else { f64::NEG_INFINITY };
    }
    let (s_from, s_to) = (from.size(), to.size());
    let adding = if s_to == s_from + 1 {
        true
    } else if s_to + 1 == s_from {
        false
    } else {
        return f64::NEG_INFINITY;
    };
    let (big, small) = if adding { (to, from) } else { (from, to) };
    let moved: Vec<usize> = big.support.iter().copied().filter(|j| !small.contains(*j)).collect();
    if moved.len() != 1 {
        return f64::NEG_INFINITY;
    }
    let p_dir = if adding {
        add_probability(s_from, params.d)
    } else {
        1.0 - add_probability(s_from, params.d)
    };
    let (candidates, probs) = candidate_probs(from, between, adding);
    let idx = candidates.iter().position(|&j| j == moved[0]).expect("moved variable is a candidate");
    h.ln() + p_dir.ln() + probs[idx].ln()
}

/// Draws a configuration from `W(current, .)`.
pub fn propose(
    config: &Configuration,
    between: &BetweenVariance,
    rng: &mut impl Rng,
    params: &KernelParams,
) -> Proposal {
    let ks = k_move_probs(config.k, params.k_max);
    let probs: Vec<f64> = ks.iter().map(|&(_, p)| p).collect();
    let new_k = ks[sample_index(&probs, rng)].0;
    let (new_config, kind) = if new_k != config.k {
        (Configuration { k: new_k, support: config.support.clone() }, MoveKind::KMove)
    } else {
        let adding = rng.random::<f64>() < add_probability(config.size(), params.d);
        let (candidates, probs) = candidate_probs(config, between, adding);
        let j = candidates[sample_index(&probs, rng)];
        let mut support = config.support.clone();
        if adding {
            support.push(j);
        } else {
            support.retain(|&v| v != j);
        }
        let kind = if adding { MoveKind::Add } else { MoveKind::Remove };
        (Configuration::new(config.k, support), kind)
    };
    let log_fwd = log_kernel(config, between, &new_config, params);
    Proposal { config: new_config, kind, log_fwd }
}

/// `ln r` for moving from `old` to `new`; the move is accepted when
/// `U <= min(1, r)`.
pub fn acceptance_log_ratio(
    old: &EvaluatedState,
    new: &EvaluatedState,
    lambda: f64,
    log_fwd: f64,
    log_bwd: f64,
    prior: &Prior,
) -> f64 {
    let lp = |c: &Configuration| prior.log_prior_clust(c.k) + prior.log_prior_supp_size(c.size());
    -lambda * (new.nll_x1 - old.nll_x1) + lp(&new.config) - lp(&old.config) + log_bwd - log_fwd
}

/// Removes a random batch of weakly separating variables: the batch size is
/// uniform on `1..=ceil(|S|/2)`, clamped so that `|S|` never drops below
/// `target`, and variables are drawn without replacement proportionally to
/// their inverse between-variance.
pub fn prune_step(
    config: &Configuration,
    between: &BetweenVariance,
    target: usize,
    rng: &mut impl Rng,
) -> Proposal {
    let s = config.size();
    debug_assert!(s > target);
    let m = rng.random_range(1..=s.div_ceil(2)).min(s - target);
    let mut remaining: Vec<usize> = config.support.clone();
    let mut weights: Vec<f64> = remaining
        .iter()
        .map(|&j| 1.0 / (between.per_variable[j].max(0.0) + INVERSE_VARB_EPS))
        .collect();
    for _ in 0..m {
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = if total > 0.0 && total.is_finite() {
            weights.iter().map(|w| w / total).collect()
        } else {
            vec![1.0 / weights.len() as f64; weights.len()]
        };
        let idx = sample_index(&probs, rng);
        remaining.remove(idx);
        weights.remove(idx);
    }
    Proposal { config: Configuration::new(config.k, remaining), kind: MoveKind::Prune, log_fwd: 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng_from;
    use ndarray::array;

    fn bv(v: &[f64]) -> BetweenVariance {
        BetweenVariance { per_variable: v.to_vec(), total: v.iter().sum() }
    }

    #[test]
    fn between_variance_basics() {
        let data = array![[-1.0, 3.0], [1.0, 3.0]];
        let two = Clustering::new(vec![0, 1], 2);
        let b = between_variance(&two, data.view()).unwrap();
        assert!((b.per_variable[0] - 1.0).abs() < 1e-15);
        assert_eq!(b.per_variable[1], 0.0);
        assert!((b.total - b.per_variable.iter().sum::<f64>()).abs() < 1e-10);

        let one = Clustering::new(vec![0, 0], 1);
        let b = between_variance(&one, data.view()).unwrap();
        assert!(b.per_variable.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn k_kernel_boundaries() {
        assert_eq!(k_move_probs(1, 10), vec![(1, 0.5), (2, 0.5)]);
        assert_eq!(k_move_probs(10, 10), vec![(9, 0.5), (10, 0.5)]);
        assert_eq!(k_move_probs(4, 10), vec![(3, 0.25), (4, 0.5), (5, 0.25)]);
    }

    #[test]
    fn full_support_at_k1() {
        let params = KernelParams { k_max: 5, d: 3 };
        let from = Configuration::full(1, 3);
        let b = bv(&[1.0, 2.0, 3.0]);
        let to = Configuration::full(2, 3);
        assert!((log_kernel(&from, &b, &to, &params).exp() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn interior_split_of_variable_moves() {
        let params = KernelParams { k_max: 5, d: 4 };
        let from = Configuration::new(3, vec![0, 1]);
        let b = bv(&[1.0, 1.0, 2.0, 2.0]);
        let add_mass: f64 = [2usize, 3]
            .iter()
            .map(|&j| log_kernel(&from, &b, &Configuration::new(3, vec![0, 1, j]), &params).exp())
            .sum();
        let remove_mass: f64 = [0usize, 1]
            .iter()
            .map(|&j| {
                let s: Vec<usize> = from.support.iter().copied().filter(|&v| v != j).collect();
                log_kernel(&from, &b, &Configuration::new(3, s), &params).exp()
            })
            .sum();
        assert!((add_mass - 0.25).abs() < 1e-15);
        assert!((remove_mass - 0.25).abs() < 1e-15);
    }

    #[test]
    fn add_weights_follow_between_variance() {
        let params = KernelParams { k_max: 1, d: 4 };
        let from = Configuration::new(1, vec![0]);
        let b = bv(&[9.0, 2.0, 1.0, 1.0]);
        let p = |j: usize| log_kernel(&from, &b, &Configuration::new(1, vec![0, j]), &params).exp();
        // K is pinned (K_max = 1), add/remove split is 1/2
        assert!((p(1) - 0.5 * 0.5).abs() < 1e-15);
        assert!((p(2) - 0.5 * 0.25).abs() < 1e-15);
        assert!((p(3) - 0.5 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let params = KernelParams { k_max: 1, d: 3 };
        let from = Configuration::new(1, vec![]);
        let b = bv(&[0.0, 0.0, 0.0]);
        for j in 0..3 {
            let p = log_kernel(&from, &b, &Configuration::new(1, vec![j]), &params).exp();
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    /// Exhaustive enumeration of every configuration for small d.
    fn all_configs(d: usize, k_max: usize) -> Vec<Configuration> {
        let mut out = Vec::new();
        for k in 1..=k_max {
            for mask in 0..(1u32 << d) {
                out.push(Configuration::new(k, (0..d).filter(|j| mask >> j & 1 == 1).collect()));
            }
        }
        out
    }

    #[test]
    fn kernel_rows_sum_to_one() {
        let mut rng = rng_from(3, &[]);
        for d in 1..=5 {
            for k_max in 1..=4 {
                let params = KernelParams { k_max, d };
                let configs = all_configs(d, k_max);
                for from in &configs {
                    let w: Vec<f64> = (0..d).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random() }).collect();
                    let b = bv(&w);
                    let total: f64 = configs.iter().map(|to| log_kernel(from, &b, to, &params).exp()).sum();
                    assert!((total - 1.0).abs() < 1e-12, "d={d} k_max={k_max} from={from}");
                }
            }
        }
    }

    #[test]
    fn sampled_proposals_match_kernel() {
        let params = KernelParams { k_max: 3, d: 3 };
        let from = Configuration::new(2, vec![1]);
        let b = bv(&[3.0, 1.0, 1.0]);
        let mut rng = rng_from(4, &[]);
        let mut counts = std::collections::HashMap::new();
        let n = 200_000;
        for _ in 0..n {
            let p = propose(&from, &b, &mut rng, &params);
            assert!((p.log_fwd - log_kernel(&from, &b, &p.config, &params)).abs() < 1e-15);
            *counts.entry(p.config).or_insert(0usize) += 1;
        }
        for (cfg, c) in counts {
            let expect = log_kernel(&from, &b, &cfg, &params).exp();
            let freq = c as f64 / n as f64;
            assert!((freq - expect).abs() < 4.0 * (expect * (1.0 - expect) / n as f64).sqrt() + 1e-9, "{cfg}");
        }
    }

    #[test]
    fn prune_respects_target() {
        let mut rng = rng_from(5, &[]);
        let from = Configuration::full(2, 100);
        let b = bv(&vec![1.0; 100]);
        for _ in 0..200 {
            let p = prune_step(&from, &b, 33, &mut rng);
            let removed = 100 - p.config.size();
            assert!((1..=50).contains(&removed));
            assert!(p.config.size() >= 33);
            assert_eq!(p.config.k, 2);
        }
        let near = Configuration::new(2, (0..35).collect());
        for _ in 0..50 {
            assert!(prune_step(&near, &b, 33, &mut rng).config.size() >= 33);
        }
    }

    #[test]
    fn prune_prefers_low_between_variance() {
        let mut rng = rng_from(6, &[]);
        let mut w = vec![1e-3; 10];
        w[0] = 100.0;
        let from = Configuration::full(2, 10);
        let b = bv(&w);
        let kept = (0..500).filter(|_| prune_step(&from, &b, 1, &mut rng).config.contains(0)).count();
        assert!(kept > 490);
    }
}
