use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mhgmm::aggregate::Criterion;
use mhgmm::data::{self, standardize, ExperimentId, MixtureSpec};
use mhgmm::error::{Error, Result};
use mhgmm::eval::ari_labels;
use mhgmm::pipeline::{run_experiment, run_pipeline, ClusteringMode, RunConfig};

#[derive(Parser)]
#[command(name = "mhgmm", version, about = "Variable selection and clustering with constrained Gaussian mixtures")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a simulated dataset as CSV (header x1..xd,label).
    Simulate {
        experiment: ExperimentId,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
        /// Standardize the columns before writing.
        #[arg(long)]
        standardized: bool,
    },
    /// Run the full method on a CSV file or a simulated setting.
    Fit(RunArgs),
    /// Adjusted Rand index between two label files.
    Eval {
        first: PathBuf,
        second: PathBuf,
        /// Column holding the labels; defaults to the last one.
        #[arg(long)]
        column: Option<String>,
    },
    /// Replicate a simulated setting and tabulate the selections.
    Experiment {
        experiment: ExperimentId,
        #[arg(long, default_value_t = 10)]
        replications: usize,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML file with run settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// The input CSV has no header row.
    #[arg(long)]
    no_header: bool,
    /// The last input column holds ground-truth labels.
    #[arg(long)]
    labels: bool,
    #[arg(long)]
    simulate: Option<ExperimentId>,
    #[arg(long)]
    splits: Option<usize>,
    /// Comma-separated temperature grid.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    k0: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    criterion: Option<Criterion>,
    #[arg(long)]
    prune_target: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ClusteringMode>,
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_toml_file(path)?,
            None => RunConfig::default(),
        };
        if self.input.is_some() {
            c.input = self.input.clone();
        }
        if self.no_header {
            c.has_header = false;
        }
        if self.labels {
            c.has_labels = true;
        }
        if self.simulate.is_some() {
            c.simulate = self.simulate;
        }
        macro_rules! take {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field.clone() { c.$target = v; })*
            };
        }
        take!(splits => splits, lambdas => lambdas, steps => steps, k0 => k0, k_max => k_max,
              criterion => criterion, seed => seed, mode => mode, jobs => jobs);
        if self.prune_target.is_some() {
            c.prune_target = self.prune_target;
        }
        if self.out.is_some() {
            c.out_dir = self.out.clone();
        }
        Ok(c)
    }
}

fn read_labels(path: &Path, column: Option<&str>) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no labels", path.display())));
    }
    let header = rows[0].clone();
    let idx = match column {
        Some(name) => {
            let i = header
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Data(format!("{}: no column named {name}", path.display())))?;
            rows.remove(0);
            i
        }
        None => {
            let last = header.len() - 1;
            if header[last].trim().parse::<f64>().is_err() {
                rows.remove(0);
            }
            last
        }
    };
    rows.iter()
        .map(|r| {
            r.get(idx)
                .map(|s| s.trim().to_string())
                .ok_or_else(|| Error::Data(format!("{}: short row", path.display())))
        })
        .collect()
}

fn dense(labels: &[String]) -> Vec<usize> {
    let mut ids = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(l.as_str()).or_insert(next)
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { experiment, seed, out, standardized } => {
            let mut ds = data::simulate_raw(&MixtureSpec::for_experiment(experiment), seed)?;
            if standardized {
                ds = standardize(&ds);
            }
            let labels = ds.labels.clone().unwrap_or_default();
            write_simulated(&ds, &labels, &out)?;
            println!("wrote {} x {} to {}", ds.n(), ds.d(), out.display());
        }
        Command::Fit(args) => {
            let cfg = args.resolve()?;
            let out = run_pipeline(&cfg)?;
            println!("{}", out.report_json()?);
            if let Some(a) = out.metrics.ari_direct {
                eprintln!("ARI (direct): {a:.4}");
            }
            if let Some(a) = out.metrics.ari_aggregated {
                eprintln!("ARI (aggregated): {a:.4}");
            }
        }
        Command::Eval { first, second, column } => {
            let a = dense(&read_labels(&first, column.as_deref())?);
            let b = dense(&read_labels(&second, column.as_deref())?);
            println!("{}", ari_labels(&a, &b)?);
        }
        Command::Experiment { experiment, replications, run } => {
            let Some(seed) = run.seed else {
                return Err(Error::Config("experiment requires --seed".into()));
            };
            let mut base = run.resolve()?;
            base.simulate = Some(experiment);
            let table = run_experiment(experiment, replications, seed, &base)?;
            if let Some(dir) = &base.out_dir {
                std::fs::create_dir_all(dir)?;
                table.write_csv(&dir.join(format!("{experiment}_replications.csv")))?;
                std::fs::write(
                    dir.join(format!("{experiment}_summary.json")),
                    serde_json::to_string_pretty(&table)? + "\n",
                )?;
            }
            println!(
                "{experiment}: K histogram {:?}, mean true active {:.2}/{}, mean false active {:.2}, ARI {:.4} (sd {:.4})",
                table.k_histogram, table.mean_true_active, table.n_active, table.mean_false_active, table.mean_ari, table.sd_ari
            );
        }
    }
    Ok(())
}

fn write_simulated(ds: &data::Dataset, labels: &[usize], out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(out)?;
    let mut header: Vec<String> = (1..=ds.d()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (i, row) in ds.values.outer_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push((labels[i] + 1).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
