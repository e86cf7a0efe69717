//! Datasets, standardization, random learning/estimation splits and the
//! simulated mixtures used by the experiment harness.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::rng_from;

/// An `n x d` matrix of observations, one row per observation.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub values: Array2<f64>,
    /// Ground-truth cluster labels (0-based), when known.
    pub labels: Option<Vec<usize>>,
    pub column_means: Vec<f64>,
    pub column_sds: Vec<f64>,
    pub standardized: bool,
}

impl Dataset {
    pub fn new(values: Array2<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        let (n, d) = values.dim();
        if n < 2 {
            return Err(Error::Data(format!("need at least 2 observations, got {n}")));
        }
        if d < 1 {
            return Err(Error::Data("need at least one variable".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, column {}",
                pos / d + 1,
                pos % d + 1
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: l.len() });
            }
        }
        let (column_means, column_sds) = column_stats(&values);
        Ok(Self { values, labels, column_means, column_sds, standardized: false })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Array2<f64> {
        self.values.select(Axis(0), indices)
    }

    /// Reads a comma-separated file. With `has_labels`, the last column is an
    /// integer cluster label; distinct labels are mapped to 0-based ids in
    /// increasing order.
    pub fn from_csv(path: &Path, has_header: bool, has_labels: bool) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(has_header)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut raw_labels: Vec<i64> = Vec::new();
        let mut width = None;
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let mut fields: Vec<&str> = record.iter().collect();
            if has_labels {
                let last = fields
                    .pop()
                    .ok_or_else(|| Error::Data(format!("empty record at line {}", line + 1)))?;
                raw_labels.push(last.parse().map_err(|_| {
                    Error::Data(format!("bad label {last:?} at record {}", line + 1))
                })?);
            }
            let row = fields
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        Error::Data(format!("bad value {f:?} at record {}", line + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::Data(format!(
                        "record {} has {} values, expected {w}",
                        line + 1,
                        row.len()
                    )))
                }
                _ => {}
            }
            rows.push(row);
        }
        let d = width.unwrap_or(0);
        let n = rows.len();
        let values = Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
            .map_err(|e| Error::Data(e.to_string()))?;
        let labels = has_labels.then(|| relabel(&raw_labels));
        Self::new(values, labels)
    }

    /// Writes the data followed by a `cluster` column holding 1-based labels.
    pub fn write_csv_with_clusters(&self, path: &Path, clusters: &[usize]) -> Result<()> {
        if clusters.len() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), found: clusters.len() });
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.d()).map(|j| format!("x{j}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        header.push("cluster".into());
        w.write_record(&header)?;
        for (i, row) in self.values.outer_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            if let Some(l) = &self.labels {
                rec.push((l[i] + 1).to_string());
            }
            rec.push((clusters[i] + 1).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the data (and 1-based labels if present) as a headerless CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for (i, row) in self.values.outer_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            if let Some(l) = &self.labels {
                rec.push((l[i] + 1).to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn relabel(raw: &[i64]) -> Vec<usize> {
    let ids: BTreeMap<i64, usize> = {
        let mut distinct: Vec<i64> = raw.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        distinct.into_iter().enumerate().map(|(i, v)| (v, i)).collect()
    };
    raw.iter().map(|v| ids[v]).collect()
}

/// Column means and sample standard deviations (divisor `n - 1`).
fn column_stats(values: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = values.nrows() as f64;
    let means: Vec<f64> = values.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default();
    let sds = values
        .axis_iter(Axis(1))
        .zip(&means)
        .map(|(col, m)| {
            let ss: f64 = col.iter().map(|v| (v - m) * (v - m)).sum();
            (ss / (n - 1.0)).sqrt()
        })
        .collect();
    (means, sds)
}

/// Centers every column and scales it to unit sample standard deviation.
///
/// Constant columns are centered only; their recorded sd is 0.
pub fn standardize(dataset: &Dataset) -> Dataset {
    let (means, mut sds) = column_stats(&dataset.values);
    let mut values = dataset.values.clone();
    for (j, mut col) in values.axis_iter_mut(Axis(1)).enumerate() {
        if col.iter().all(|&v| v == col[0]) {
            log::warn!("column {} is constant; centered but not scaled", j + 1);
            sds[j] = 0.0;
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| (v - means[j]) / sds[j]);
        }
    }
    Dataset {
        values,
        labels: dataset.labels.clone(),
        column_means: means,
        column_sds: sds,
        standardized: true,
    }
}

/// A random partition of `0..n` into a learning part and an estimation part.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPair {
    pub learn_indices: Vec<usize>,
    pub estimate_indices: Vec<usize>,
    pub seed: u64,
}

/// Uniformly random split with `round(fraction * n)` learning observations.
/// Index lists are returned sorted.
pub fn split(n: usize, fraction: f64, seed: u64) -> Result<SplitPair> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let n_learn = (fraction * n as f64).round() as usize;
    if n_learn == 0 || n_learn >= n {
        return Err(Error::Config(format!(
            "split fraction {fraction} leaves an empty part for n = {n}"
        )));
    }
    let mut rng = rng_from(seed, &[0x5b1_17]);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut learn_indices = perm[..n_learn].to_vec();
    let mut estimate_indices = perm[n_learn..].to_vec();
    learn_indices.sort_unstable();
    estimate_indices.sort_unstable();
    Ok(SplitPair { learn_indices, estimate_indices, seed })
}

/// The simulated settings reproduced by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    Illustrative,
    Exp1,
    Exp2,
}

impl std::fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExperimentId::Illustrative => "illustrative",
            ExperimentId::Exp1 => "exp1",
            ExperimentId::Exp2 => "exp2",
        })
    }
}

/// A Gaussian mixture with unit variances whose first `means[k].len()`
/// variables are active; all remaining variables are N(0, 1) noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub d: usize,
    /// Per-component means of the active variables.
    pub means: Vec<Vec<f64>>,
    /// Number of observations drawn from each component.
    pub sizes: Vec<usize>,
}

impl MixtureSpec {
    pub fn for_experiment(id: ExperimentId) -> Self {
        match id {
            ExperimentId::Illustrative => Self {
                d: 100,
                means: vec![vec![1.0; 15], vec![0.0; 15]],
                sizes: vec![100, 100],
            },
            ExperimentId::Exp1 => {
                let a: Vec<f64> = (0..20).map(|j| 1.0 - 0.05 * j as f64).collect();
                let neg: Vec<f64> = a.iter().map(|v| -v).collect();
                Self { d: 100, means: vec![a, vec![0.0; 20], neg], sizes: vec![200, 200, 400] }
            }
            ExperimentId::Exp2 => Self {
                d: 100,
                means: vec![vec![2.0; 15], vec![0.3; 15], vec![-0.3; 15], vec![-2.0; 15]],
                sizes: vec![100, 200, 200, 100],
            },
        }
    }

    pub fn n_active(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() || self.means.len() != self.sizes.len() {
            return Err(Error::Config(format!(
                "mixture spec has {} mean vectors and {} sizes",
                self.means.len(),
                self.sizes.len()
            )));
        }
        if self.sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("mixture component sizes must be positive".into()));
        }
        let a = self.n_active();
        if self.means.iter().any(|m| m.len() != a) {
            return Err(Error::Config("mean vectors have different lengths".into()));
        }
        if a > self.d || self.d == 0 {
            return Err(Error::Config(format!("{a} active variables exceed d = {}", self.d)));
        }
        if self.sizes.iter().sum::<usize>() < 2 {
            return Err(Error::Config("mixture spec must produce at least 2 observations".into()));
        }
        Ok(())
    }
}

/// Draws the raw (unstandardized) sample of `spec`. Observations come in
/// component order.
pub fn simulate_raw(spec: &MixtureSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let n: usize = spec.sizes.iter().sum();
    let mut rng = rng_from(seed, &[0x51_u64]);
    let mut values = Array2::<f64>::zeros((n, spec.d));
    let mut labels = Vec::with_capacity(n);
    let mut i = 0;
    for (k, (&size, mu)) in spec.sizes.iter().zip(&spec.means).enumerate() {
        for _ in 0..size {
            for j in 0..spec.d {
                let z: f64 = rng.sample(StandardNormal);
                values[[i, j]] = z + mu.get(j).copied().unwrap_or(0.0);
            }
            labels.push(k);
            i += 1;
        }
    }
    Dataset::new(values, Some(labels))
}

/// Simulates `spec` and standardizes the result.
pub fn simulate(spec: &MixtureSpec, seed: u64) -> Result<Dataset> {
    Ok(standardize(&simulate_raw(spec, seed)?))
}

pub fn simulate_experiment(id: ExperimentId, seed: u64) -> Result<Dataset> {
    simulate(&MixtureSpec::for_experiment(id), seed)
}
