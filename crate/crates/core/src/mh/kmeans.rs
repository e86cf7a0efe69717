//! Lloyd's k-means with k-means++ seeding and restarts.

use ndarray::ArrayView2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gmm::Clustering;
use crate::math::rng_from;

#[derive(Debug, Clone)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { restarts: 10, max_iter: 100 }
    }
}

/// k-means with default options (10 restarts, best within-cluster sum of
/// squares wins).
pub fn kmeans(data: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<Clustering> {
    kmeans_with(data, k, &KMeansOptions::default(), seed)
}

pub fn kmeans_with(
    data: ArrayView2<'_, f64>,
    k: usize,
    opts: &KMeansOptions,
    seed: u64,
) -> Result<Clustering> {
    let n = data.nrows();
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    if k > n {
        return Err(Error::Data(format!("k-means with k = {k} on {n} observations")));
    }
    if k == 1 {
        return Ok(Clustering::new(vec![0; n], 1));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for r in 0..opts.restarts.max(1) {
        let mut rng = rng_from(seed, &[0x6b, r as u64]);
        let (wcss, labels) = lloyd(data, k, opts.max_iter, &mut rng);
        if best.as_ref().is_none_or(|(b, _)| wcss < *b) {
            best = Some((wcss, labels));
        }
    }
    let (_, labels) = best.expect("at least one restart");
    Ok(Clustering::new(labels, k))
}

/// Squared Euclidean distance with four independent accumulators so the
/// loop vectorizes.
#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let t = x[l] - y[l];
            acc[l] += t * t;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += (x - y) * (x - y);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-major copy of the data with row accessors.
struct Rows<'a> {
    flat: &'a [f64],
    d: usize,
}

impl Rows<'_> {
    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.flat[i * self.d..(i + 1) * self.d]
    }
}

fn plus_plus(x: &Rows<'_>, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = x.d;
    let mut centers = vec![0.0; k * d];
    let first = rng.random_range(0..n);
    centers[..d].copy_from_slice(x.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[..d])).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers[c * d..(c + 1) * d].copy_from_slice(x.row(pick));
        let center = &centers[c * d..(c + 1) * d];
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(x.row(i), center));
        }
    }
    centers
}

fn lloyd(data: ArrayView2<'_, f64>, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<usize>) {
    let (n, d) = data.dim();
    let owned;
    let flat = match data.as_slice() {
        Some(s) => s,
        None => {
            owned = data.iter().copied().collect::<Vec<f64>>();
            &owned[..]
        }
    };
    let x = Rows { flat, d };
    let mut centers = plus_plus(&x, n, k, rng);
    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut sums = vec![0.0; k * d];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for i in 0..n {
            let xi = x.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dd = sq_dist(xi, &centers[c * d..(c + 1) * d]);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            dists[i] = best_d;
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        // Refill empty clusters with the points farthest from their centers.
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]));
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    labels[i] = c;
                    counts[c] = 1;
                    dists[i] = 0.0;
                    changed = true;
                }
            }
        }
        sums.fill(0.0);
        for (i, &l) in labels.iter().enumerate() {
            for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let cnt = counts[c] as f64;
                for (m, s) in centers[c * d..(c + 1) * d].iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *m = s / cnt;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let wcss = (0..n).map(|i| sq_dist(x.row(i), &centers[labels[i] * d..(labels[i] + 1) * d])).sum();
    (wcss, labels)
}
