//! Clustering with simultaneous selection of the number of clusters and of
//! the relevant variables.
//!
//! Candidate configurations `(K, S)` are scored by fitting a Gaussian mixture
//! in which only the variables in `S` carry cluster structure, and explored
//! with a Metropolis-Hastings chain whose proposals are guided by the
//! between-cluster variance of each variable. Chains run over several random
//! splits of the data and several temperatures; the per-split choices are
//! then combined by majority vote.
//!
//! ```no_run
//! use mhgmm::pipeline::{run_pipeline, RunConfig};
//! use mhgmm::data::ExperimentId;
//!
//! let cfg = RunConfig { simulate: Some(ExperimentId::Illustrative), seed: 7, ..Default::default() };
//! let out = run_pipeline(&cfg).unwrap();
//! println!("{}", out.eta_hat);
//! ```

pub mod aggregate;
pub mod data;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod math;
pub mod mh;
pub mod pipeline;
pub mod prior;

pub use error::{Error, Result};
pub use gmm::{Clustering, Configuration, GmmModel, Shape};
