//! Log-prior over configurations `(K, S)`: a Poisson prior on the number of
//! clusters times a support prior that decays exponentially with `|S|`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::Configuration;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub d: usize,
    pub k_max: usize,
    /// Poisson intensity of the cluster-count prior.
    pub intensity: f64,
}

impl PriorParams {
    pub fn new(d: usize, k_max: usize) -> Self {
        Self { d, k_max, intensity: 1.0 }
    }
}

/// Precomputed log-prior. Unnormalized in `K` (the Poisson mass at `K = 0` is
/// never used); normalized over all subsets of `{1..d}`.
#[derive(Debug, Clone)]
pub struct Prior {
    params: PriorParams,
    ln_fact: Vec<f64>,
    ln_c_d: f64,
}

impl Prior {
    pub fn new(params: PriorParams) -> Result<Self> {
        if params.d == 0 || params.k_max == 0 {
            return Err(Error::Config("prior needs d >= 1 and K_max >= 1".into()));
        }
        if !(params.intensity > 0.0) {
            return Err(Error::Config("Poisson intensity must be positive".into()));
        }
        let top = params.d.max(params.k_max);
        let mut ln_fact = Vec::with_capacity(top + 1);
        ln_fact.push(0.0);
        for i in 1..=top {
            ln_fact.push(ln_fact[i - 1] + (i as f64).ln());
        }
        // C_d = sum_{k=0}^{d} e^{-k} = (1 - e^{-(d+1)}) / (1 - e^{-1})
        let ln_c_d = (-(-(params.d as f64 + 1.0)).exp_m1()).ln() - (-(-1.0f64).exp_m1()).ln();
        Ok(Self { params, ln_fact, ln_c_d })
    }

    pub fn params(&self) -> &PriorParams {
        &self.params
    }

    /// `ln pi_clust(K) = -rho + K ln rho - ln K!`
    pub fn log_prior_clust(&self, k: usize) -> f64 {
        let rho = self.params.intensity;
        -rho + k as f64 * rho.ln() - self.ln_fact[k]
    }

    /// `ln pi_supp(S) = -ln C(d, |S|) - |S| - ln C_d`
    pub fn log_prior_supp_size(&self, s: usize) -> f64 {
        let d = self.params.d;
        let ln_binom = self.ln_fact[d] - self.ln_fact[s] - self.ln_fact[d - s];
        -ln_binom - s as f64 - self.ln_c_d
    }

    pub fn log_prior(&self, config: &Configuration) -> Result<f64> {
        if config.k == 0 || config.k > self.params.k_max {
            return Err(Error::Config(format!(
                "K = {} outside 1..={}",
                config.k, self.params.k_max
            )));
        }
        if config.support.last().is_some_and(|&j| j >= self.params.d) {
            return Err(Error::DimensionMismatch {
                expected: self.params.d,
                found: config.support.last().copied().unwrap_or(0) + 1,
            });
        }
        Ok(self.log_prior_clust(config.k) + self.log_prior_supp_size(config.size()))
    }
}

/// One-shot `ln pi(K, S)`.
pub fn log_prior(config: &Configuration, params: &PriorParams) -> Result<f64> {
    Prior::new(params.clone())?.log_prior(config)
}
