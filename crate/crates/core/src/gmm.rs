//! Gaussian mixtures whose clustering structure lives on a subset `S` of the
//! variables.
//!
//! A configuration `(K, S)` fixes the number of components and the active
//! variables. Off `S` every component is the standard normal; on `S` the
//! components have their own means and share one diagonal covariance (the
//! `LB` shape). The density factorizes as
//!
//! ```text
//! f(x) = phi_{S^c}(x_{S^c} | 0, I) * sum_k p_k phi_S(x_S | mu_k, diag(sigma^2))
//! ```
//!
//! so everything below works on the `|S|` active columns and adds the
//! standard-normal term for the rest.

use std::fmt;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{derive_seed, log_sum_exp, std_normal_ln_pdf, LN_2PI};
use crate::mh::kmeans::{kmeans_with, KMeansOptions};

/// The discrete meta-parameter `(K, S)`. `support` holds sorted 0-based
/// variable indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Configuration {
    pub k: usize,
    pub support: Vec<usize>,
}

impl Configuration {
    pub fn new(k: usize, mut support: Vec<usize>) -> Self {
        support.sort_unstable();
        support.dedup();
        Self { k, support }
    }

    pub fn full(k: usize, d: usize) -> Self {
        Self { k, support: (0..d).collect() }
    }

    pub fn size(&self) -> usize {
        self.support.len()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.support.binary_search(&j).is_ok()
    }

    /// Support as 1-based indices, the convention used in every output file.
    pub fn support_one_based(&self) -> Vec<usize> {
        self.support.iter().map(|j| j + 1).collect()
    }

    /// Membership mask over `0..d`.
    pub fn mask(&self, d: usize) -> Vec<bool> {
        let mut m = vec![false; d];
        for &j in &self.support {
            m[j] = true;
        }
        m
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "K={} S={{", self.k)?;
        for (i, j) in self.support.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", j + 1)?;
        }
        f.write_str("}")
    }
}

/// Covariance constraint family on the active variables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    /// All components share one diagonal covariance.
    #[default]
    #[serde(rename = "LB")]
    Lb,
}

/// A hard assignment of observations to clusters `0..k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl Clustering {
    pub fn new(labels: Vec<usize>, k: usize) -> Self {
        debug_assert!(labels.iter().all(|&l| l < k));
        Self { labels, k }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// Fitted parameters of a constrained mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub config: Configuration,
    pub shape: Shape,
    pub proportions: Vec<f64>,
    /// `K x |S|` component means on the active variables.
    pub means: Array2<f64>,
    /// Shared variances of the active variables.
    pub variances: Vec<f64>,
    pub d: usize,
}

/// Per-model constants reused across rows.
struct Scorer<'a> {
    model: &'a GmmModel,
    inv_var: Vec<f64>,
    /// `ln p_k - 0.5 * (|S| ln 2pi + sum_j ln sigma_j^2)`
    offsets: Vec<f64>,
}

impl<'a> Scorer<'a> {
    fn new(model: &'a GmmModel) -> Self {
        let inv_var: Vec<f64> = model.variances.iter().map(|v| 1.0 / v).collect();
        let log_det: f64 = model.variances.iter().map(|v| v.ln()).sum();
        let base = -0.5 * (model.config.size() as f64 * LN_2PI + log_det);
        let offsets = model.proportions.iter().map(|p| p.ln() + base).collect();
        Self { model, inv_var, offsets }
    }

    /// `ln(p_k phi_S(x_S))` for every component; `x` has all `d` coordinates.
    fn component_scores(&self, x: ArrayView1<'_, f64>, out: &mut [f64]) {
        let support = &self.model.config.support;
        for (k, out_k) in out.iter_mut().enumerate() {
            let mu = self.model.means.row(k);
            let mut q = 0.0;
            for (s, &j) in support.iter().enumerate() {
                let diff = x[j] - mu[s];
                q += diff * diff * self.inv_var[s];
            }
            *out_k = self.offsets[k] - 0.5 * q;
        }
    }

    /// Standard-normal log-density of the inactive coordinates.
    fn noise(&self, x: ArrayView1<'_, f64>) -> f64 {
        let support = &self.model.config.support;
        let mut next = support.iter().peekable();
        let mut acc = 0.0;
        for (j, &v) in x.iter().enumerate() {
            if next.peek() == Some(&&j) {
                next.next();
                continue;
            }
            acc += std_normal_ln_pdf(v);
        }
        acc
    }
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.config.k
    }

    /// The pure-noise model: every coordinate standard normal.
    pub fn noise_only(k: usize, d: usize) -> Self {
        Self {
            config: Configuration::new(k, Vec::new()),
            shape: Shape::Lb,
            proportions: vec![1.0 / k as f64; k],
            means: Array2::zeros((k, 0)),
            variances: Vec::new(),
            d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.config.k;
        let s = self.config.size();
        if k == 0 {
            return Err(Error::Config("model needs at least one component".into()));
        }
        if self.proportions.len() != k || self.means.dim() != (k, s) || self.variances.len() != s {
            return Err(Error::Config("model parameter dimensions disagree with (K, S)".into()));
        }
        if self.config.support.iter().any(|&j| j >= self.d) {
            return Err(Error::Config("support index beyond the ambient dimension".into()));
        }
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.proportions.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Config("proportions must be non-negative and sum to 1".into()));
        }
        if self.variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("variances must be positive".into()));
        }
        Ok(())
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, found });
        }
        Ok(())
    }

    /// `ln f(x)` evaluated in the log domain.
    pub fn log_density(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        self.check_dim(x.len())?;
        let scorer = Scorer::new(self);
        let mut scores = vec![0.0; self.k()];
        scorer.component_scores(x, &mut scores);
        Ok(scorer.noise(x) + log_sum_exp(&scores))
    }

    /// Negative log-likelihood of the rows of `data`.
    pub fn neg_log_likelihood(&self, data: ArrayView2<'_, f64>) -> Result<f64> {
        if data.nrows() == 0 {
            return Err(Error::Data("negative log-likelihood of an empty sample".into()));
        }
        self.check_dim(data.ncols())?;
        let scorer = Scorer::new(self);
        let mut scores = vec![0.0; self.k()];
        let mut total = 0.0;
        for x in data.outer_iter() {
            scorer.component_scores(x, &mut scores);
            total -= scorer.noise(x) + log_sum_exp(&scores);
        }
        if !total.is_finite() {
            return Err(Error::Numerical("non-finite negative log-likelihood".into()));
        }
        Ok(total)
    }

    /// Conditional component probabilities, one row per observation.
    pub fn responsibilities(&self, data: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dim(data.ncols())?;
        let scorer = Scorer::new(self);
        let mut out = Array2::zeros((data.nrows(), self.k()));
        let mut scores = vec![0.0; self.k()];
        for (x, mut row) in data.outer_iter().zip(out.outer_iter_mut()) {
            scorer.component_scores(x, &mut scores);
            let lse = log_sum_exp(&scores);
            for (t, s) in row.iter_mut().zip(&scores) {
                *t = (s - lse).exp();
            }
        }
        Ok(out)
    }

    /// Maximum a posteriori assignment; ties go to the lowest component.
    pub fn map_clustering(&self, data: ArrayView2<'_, f64>) -> Result<Clustering> {
        self.check_dim(data.ncols())?;
        let scorer = Scorer::new(self);
        let mut scores = vec![0.0; self.k()];
        let labels = data
            .outer_iter()
            .map(|x| {
                scorer.component_scores(x, &mut scores);
                argmax(&scores)
            })
            .collect();
        Ok(Clustering::new(labels, self.k()))
    }
}

/// Index of the first maximum.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// How to count the free parameters of a configuration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamCount {
    /// `(K - 1) + K|S| + |S|`: proportions, means and shared variances.
    #[default]
    Direct,
    /// `(K + 1)|S| - 1`, kept for reproducing the theoretical constants.
    Compat,
}

/// Number of free parameters of the `LB` model for `config`.
///
/// An empty support is the fully specified noise model and has none.
pub fn free_params(config: &Configuration, shape: Shape, count: ParamCount) -> usize {
    let Shape::Lb = shape;
    let s = config.size();
    if s == 0 {
        return 0;
    }
    match count {
        ParamCount::Direct => (config.k - 1) + config.k * s + s,
        ParamCount::Compat => (config.k + 1) * s - 1,
    }
}

/// EM settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmOptions {
    pub n_starts: usize,
    /// Stop when the relative decrease of the negative log-likelihood falls
    /// below this value.
    pub tol: f64,
    pub max_iter: usize,
    pub variance_floor: f64,
    /// Restarts of the k-means run that seeds each EM start.
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { n_starts: 3, tol: 1e-6, max_iter: 200, variance_floor: 1e-4, kmeans_restarts: 1, seed: 0 }
    }
}

/// Result of an EM run: the best model over all starts and its history.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: GmmModel,
    pub nll: f64,
    /// Negative log-likelihood after every E-step of the winning start.
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Maximum-likelihood fit of `config` on the rows of `data` by EM.
pub fn fit_em(
    data: ArrayView2<'_, f64>,
    config: &Configuration,
    shape: Shape,
    opts: &EmOptions,
) -> Result<GmmModel> {
    fit_em_detailed(data, config, shape, opts).map(|f| f.model)
}

pub fn fit_em_detailed(
    data: ArrayView2<'_, f64>,
    config: &Configuration,
    shape: Shape,
    opts: &EmOptions,
) -> Result<EmFit> {
    let (n, d) = data.dim();
    let k = config.k;
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Data(format!("cannot fit K = {k} components on {n} observations")));
    }
    if let Some(&j) = config.support.iter().find(|&&j| j >= d) {
        return Err(Error::DimensionMismatch { expected: d, found: j + 1 });
    }
    let noise: f64 = {
        let mask = config.mask(d);
        data.outer_iter()
            .map(|x| {
                x.iter()
                    .zip(&mask)
                    .filter(|(_, &active)| !active)
                    .map(|(&v, _)| std_normal_ln_pdf(v))
                    .sum::<f64>()
            })
            .sum()
    };

    if config.support.is_empty() {
        let model = GmmModel::noise_only(k, d);
        return Ok(EmFit { model, nll: -noise, trace: vec![-noise], converged: true });
    }

    let y = data.select(Axis(1), &config.support).as_standard_layout().into_owned();
    let mut best: Option<(Vec<f64>, Array2<f64>, Vec<f64>, Vec<f64>, bool)> = None;
    for start in 0..opts.n_starts.max(1) {
        let seed = derive_seed(opts.seed, &[start as u64]);
        let (p, mu, var, trace, converged) = em_single_start(y.view(), k, noise, opts, seed)?;
        let nll = *trace.last().expect("trace is never empty");
        let better = match &best {
            None => true,
            Some((_, _, _, bt, _)) => nll < *bt.last().expect("trace is never empty"),
        };
        if better {
            best = Some((p, mu, var, trace, converged));
        }
    }
    let (proportions, means, variances, trace, converged) = best.expect("at least one start");
    let nll = *trace.last().expect("trace is never empty");
    if !nll.is_finite() {
        return Err(Error::Numerical(format!("EM produced a non-finite likelihood for {config}")));
    }
    let model = GmmModel { config: config.clone(), shape, proportions, means, variances, d };
    Ok(EmFit { model, nll, trace, converged })
}

type StartResult = (Vec<f64>, Array2<f64>, Vec<f64>, Vec<f64>, bool);

/// `sum_j (x_j - m_j)^2 w_j`, with four accumulators so the loop vectorizes.
#[inline]
fn weighted_sq_dist(x: &[f64], m: &[f64], w: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (cx, cm, cw) = (x.chunks_exact(4), m.chunks_exact(4), w.chunks_exact(4));
    let (rx, rm, rw) = (cx.remainder(), cm.remainder(), cw.remainder());
    for ((a, b), c) in cx.zip(cm).zip(cw) {
        for l in 0..4 {
            let t = a[l] - b[l];
            acc[l] += t * t * c[l];
        }
    }
    let mut tail = 0.0;
    for ((a, b), c) in rx.iter().zip(rm).zip(rw) {
        tail += (a - b) * (a - b) * c;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Responsibilities and per-row log-likelihoods of the active-variable mixture.
fn e_step(
    y: ArrayView2<'_, f64>,
    p: &[f64],
    mu: &Array2<f64>,
    var: &[f64],
    resp: &mut Array2<f64>,
    row_ll: &mut [f64],
) {
    let s = var.len();
    let k = p.len();
    let inv_var: Vec<f64> = var.iter().map(|v| 1.0 / v).collect();
    let base = -0.5 * (s as f64 * LN_2PI + var.iter().map(|v| v.ln()).sum::<f64>());
    let offsets: Vec<f64> = p.iter().map(|pk| pk.ln() + base).collect();
    let mu = mu.as_standard_layout();
    let mu = mu.as_slice().expect("standard layout");
    let resp = resp.as_slice_mut().expect("responsibilities are contiguous");
    let mut scores = vec![0.0; k];
    for (i, x) in y.outer_iter().enumerate() {
        let x = x.to_slice().expect("rows are contiguous");
        for (kk, score) in scores.iter_mut().enumerate() {
            let m = &mu[kk * s..(kk + 1) * s];
            *score = offsets[kk] - 0.5 * weighted_sq_dist(x, m, &inv_var);
        }
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let t = &mut resp[i * k..(i + 1) * k];
        let mut total = 0.0;
        for (tk, sk) in t.iter_mut().zip(&scores) {
            *tk = (sk - top).exp();
            total += *tk;
        }
        row_ll[i] = top + total.ln();
        t.iter_mut().for_each(|tk| *tk /= total);
    }
}

fn em_single_start(
    y: ArrayView2<'_, f64>,
    k: usize,
    noise: f64,
    opts: &EmOptions,
    seed: u64,
) -> Result<StartResult> {
    let (n, s) = y.dim();
    let nf = n as f64;
    let km = kmeans_with(y, k, &KMeansOptions { restarts: opts.kmeans_restarts, ..Default::default() }, seed)?;

    let mut mu = Array2::<f64>::zeros((k, s));
    let sizes = km.sizes();
    for (x, &l) in y.outer_iter().zip(&km.labels) {
        let mut row = mu.row_mut(l);
        row += &x;
    }
    for (kk, &c) in sizes.iter().enumerate() {
        if c > 0 {
            mu.row_mut(kk).mapv_inplace(|v| v / c as f64);
        }
    }
    let col_mean = y.mean_axis(Axis(0)).expect("non-empty sample");
    let mut var: Vec<f64> = (0..s)
        .map(|j| {
            let m = col_mean[j];
            let v = y.column(j).iter().map(|x| (x - m) * (x - m)).sum::<f64>() / nf;
            v.max(opts.variance_floor)
        })
        .collect();
    let mut p = vec![1.0 / k as f64; k];

    let mut resp = Array2::<f64>::zeros((n, k));
    let mut row_ll = vec![0.0; n];
    let mut trace = Vec::new();
    let mut reseeded = false;
    let mut converged = false;

    for _ in 0..opts.max_iter {
        e_step(y, &p, &mu, &var, &mut resp, &mut row_ll);
        let mut nll = -row_ll.iter().sum::<f64>() - noise;

        // One attempt at re-seeding a vanishing component from the worst-fit
        // observation; kept only when it does not raise the likelihood.
        if !reseeded && k > 1 {
            let mass = resp.sum_axis(Axis(0));
            if let Some(empty) = (0..k).find(|&kk| mass[kk] < 0.5) {
                reseeded = true;
                let worst = (0..n)
                    .min_by(|&a, &b| row_ll[a].total_cmp(&row_ll[b]))
                    .expect("non-empty sample");
                let mut cand_mu = mu.clone();
                cand_mu.row_mut(empty).assign(&y.row(worst));
                let mut cand_p = p.clone();
                cand_p[empty] = 1.0 / nf;
                let total: f64 = cand_p.iter().sum();
                cand_p.iter_mut().for_each(|v| *v /= total);
                let mut cand_resp = resp.clone();
                let mut cand_ll = row_ll.clone();
                e_step(y, &cand_p, &cand_mu, &var, &mut cand_resp, &mut cand_ll);
                let cand_nll = -cand_ll.iter().sum::<f64>() - noise;
                if cand_nll <= nll {
                    log::debug!("re-seeded component {empty} from observation {worst}");
                    mu = cand_mu;
                    p = cand_p;
                    resp = cand_resp;
                    row_ll = cand_ll;
                    nll = cand_nll;
                }
            }
        }

        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if (prev - nll) / prev.abs().max(f64::MIN_POSITIVE) < opts.tol {
                trace.push(nll);
                converged = true;
                break;
            }
        }
        trace.push(nll);

        // M-step
        let mass = resp.sum_axis(Axis(0));
        for kk in 0..k {
            p[kk] = mass[kk] / nf;
        }
        let mut new_mu = resp.t().dot(&y);
        for kk in 0..k {
            if mass[kk] > 0.0 {
                new_mu.row_mut(kk).mapv_inplace(|v| v / mass[kk]);
            } else {
                new_mu.row_mut(kk).assign(&mu.row(kk));
            }
        }
        mu = new_mu;
        let mut ss = vec![0.0; s];
        let mu_std = mu.as_standard_layout();
        let mu_flat = mu_std.as_slice().expect("standard layout");
        for (x, t) in y.outer_iter().zip(resp.outer_iter()) {
            let x = x.to_slice().expect("rows are contiguous");
            for kk in 0..k {
                let w = t[kk];
                if w == 0.0 {
                    continue;
                }
                let m = &mu_flat[kk * s..(kk + 1) * s];
                for j in 0..s {
                    let diff = x[j] - m[j];
                    ss[j] += w * diff * diff;
                }
            }
        }
        for j in 0..s {
            var[j] = (ss[j] / nf).max(opts.variance_floor);
        }
    }
    if !converged {
        // Report the likelihood of the parameters actually returned.
        e_step(y, &p, &mu, &var, &mut resp, &mut row_ll);
        trace.push(-row_ll.iter().sum::<f64>() - noise);
    }
    Ok((p, mu, var, trace, converged))
}

/// JSON form of a model. Support indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "S")]
    pub s: Vec<usize>,
    pub proportions: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    pub shape: Shape,
    pub d: usize,
}

impl From<&GmmModel> for ModelDocument {
    fn from(m: &GmmModel) -> Self {
        Self {
            k: m.k(),
            s: m.config.support_one_based(),
            proportions: m.proportions.clone(),
            means: m.means.outer_iter().map(|r| r.to_vec()).collect(),
            variances: m.variances.clone(),
            shape: m.shape,
            d: m.d,
        }
    }
}

impl TryFrom<ModelDocument> for GmmModel {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        if doc.s.iter().any(|&j| j == 0) {
            return Err(Error::Data("support indices are 1-based".into()));
        }
        let s = doc.s.len();
        let flat: Vec<f64> = doc.means.iter().flatten().copied().collect();
        if doc.means.len() != doc.k || doc.means.iter().any(|r| r.len() != s) {
            return Err(Error::Data("means must be a K x |S| array".into()));
        }
        let means = Array2::from_shape_vec((doc.k, s), flat).map_err(|e| Error::Data(e.to_string()))?;
        let model = GmmModel {
            config: Configuration::new(doc.k, doc.s.iter().map(|j| j - 1).collect()),
            shape: doc.shape,
            proportions: doc.proportions,
            means,
            variances: doc.variances,
            d: doc.d,
        };
        model.validate()?;
        Ok(model)
    }
}

impl GmmModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<ModelDocument>(text)?.try_into()
    }
}
