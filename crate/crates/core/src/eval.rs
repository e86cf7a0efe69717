//! Clustering agreement and density-estimation quality.

use std::collections::HashMap;

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gmm::{Clustering, GmmModel};
use crate::math::rng_from;

/// Counts of observations shared by each pair of clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

impl ContingencyTable {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
        }
        let dense = |labels: &[usize]| -> (Vec<usize>, usize) {
            let mut ids = HashMap::new();
            let mapped = labels
                .iter()
                .map(|l| {
                    let next = ids.len();
                    *ids.entry(*l).or_insert(next)
                })
                .collect();
            (mapped, ids.len())
        };
        let (ra, r) = dense(a);
        let (cb, c) = dense(b);
        let mut counts = vec![vec![0u64; c]; r];
        for (&i, &j) in ra.iter().zip(&cb) {
            counts[i][j] += 1;
        }
        let row_sums = counts.iter().map(|row| row.iter().sum()).collect();
        let col_sums = (0..c).map(|j| counts.iter().map(|row| row[j]).sum()).collect();
        Ok(Self { counts, row_sums, col_sums, n: a.len() as u64 })
    }
}

fn pairs(m: u64) -> i128 {
    let m = m as i128;
    m * (m - 1) / 2
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    a = a.abs();
    b = b.abs();
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Adjusted Rand index of two label vectors.
///
/// The value is computed as an exact integer ratio reduced to lowest terms
/// before the single floating-point division. When both partitions are
/// trivial (the index has no room above its expectation) the result is 1 for
/// identical partitions and 0 otherwise.
pub fn ari_labels(a: &[usize], b: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(a, b)?;
    let index: i128 = table.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let sa: i128 = table.row_sums.iter().map(|&c| pairs(c)).sum();
    let sb: i128 = table.col_sums.iter().map(|&c| pairs(c)).sum();
    let total = pairs(table.n);
    // (Index - Expected) / (Max - Expected) scaled by 2 * total
    let num = 2 * (total * index - sa * sb);
    let den = total * (sa + sb) - 2 * sa * sb;
    if den == 0 {
        let identical = table.counts.iter().all(|row| row.iter().filter(|&&c| c > 0).count() <= 1)
            && table.row_sums.len() == table.col_sums.len();
        return Ok(if identical { 1.0 } else { 0.0 });
    }
    let g = gcd(num, den);
    Ok((num / g) as f64 / (den / g) as f64)
}

pub fn ari(a: &Clustering, b: &Clustering) -> Result<f64> {
    ari_labels(&a.labels, &b.labels)
}

/// Monte-Carlo estimate of the squared Hellinger distance `1 - BC(f*, f)`
/// with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HellingerEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Anything with a log-density on `R^d`.
pub trait LogDensity {
    fn ln_density(&self, x: ArrayView1<'_, f64>) -> Result<f64>;
}

impl LogDensity for GmmModel {
    fn ln_density(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        self.log_density(x)
    }
}

impl<F> LogDensity for F
where
    F: Fn(ArrayView1<'_, f64>) -> f64,
{
    fn ln_density(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        Ok(self(x))
    }
}

/// `H^2 = 1 - E_{x ~ f*}[ sqrt(f(x) / f*(x)) ]`, estimated from `n_mc`
/// draws of `truth_sampler`. The estimate is clamped to `[0, 1]`.
pub fn mc_hellinger_sq<M, T, S>(
    model: &M,
    truth_sampler: S,
    truth_log_density: &T,
    n_mc: usize,
    seed: u64,
) -> Result<HellingerEstimate>
where
    M: LogDensity + ?Sized,
    T: LogDensity + ?Sized,
    S: Fn(&mut ChaCha8Rng) -> Array1<f64>,
{
    if n_mc < 100 {
        return Err(Error::Config(format!("n_mc must be at least 100, got {n_mc}")));
    }
    let mut rng = rng_from(seed, &[0x4e11]);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_mc {
        let x = truth_sampler(&mut rng);
        let lf = model.ln_density(x.view())?;
        let lt = truth_log_density.ln_density(x.view())?;
        if !lt.is_finite() || lf.is_nan() || lf == f64::INFINITY {
            return Err(Error::Numerical("non-finite log-density at a sampled point".into()));
        }
        let r = (0.5 * (lf - lt)).exp();
        sum += r;
        sum_sq += r * r;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(HellingerEstimate { estimate: (1.0 - mean).clamp(0.0, 1.0), std_error: (var / n).sqrt() })
}

/// Draws a standard normal vector of length `d` shifted by `mean`.
pub fn shifted_normal_sampler(mean: Vec<f64>) -> impl Fn(&mut ChaCha8Rng) -> Array1<f64> {
    move |rng: &mut ChaCha8Rng| {
        Array1::from_iter(mean.iter().map(|m| m + rng.sample::<f64, _>(rand_distr::StandardNormal)))
    }
}
