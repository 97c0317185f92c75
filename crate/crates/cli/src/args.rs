//! Command-line flags and the matching config-file tables.
//!
//! Every subcommand's options are `Option`s so that a flag can be told apart
//! from its absence; flags win over the config file, and the config file
//! wins over built-in defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "pmelm", version, about = "Poisson mixed-model fitting and influence diagnostics")]
pub struct Cli {
    /// TOML config file; keys are `<subcommand>.<flag>` with dashes as
    /// underscores, plus top-level `threads` and `quiet`.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a panel and write it as CSV with a JSON metadata sidecar.
    Simulate(SimulateArgs),
    /// Apply one of the six contamination methods to a panel.
    Contaminate(ContaminateArgs),
    /// Fit the model by maximum likelihood and write the fit as JSON.
    Fit(FitArgs),
    /// Compute per-subject influence diagnostics from a panel and its fit.
    Diagnose(DiagnoseArgs),
    /// Draw needle, scatter, or trajectory plots as SVG.
    Plot(PlotArgs),
    /// Run the contamination detection study over the simulation grid.
    Study(StudyArgs),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub threads: Option<usize>,
    pub quiet: Option<bool>,
    #[serde(default)]
    pub simulate: SimulateArgs,
    #[serde(default)]
    pub contaminate: ContaminateArgs,
    #[serde(default)]
    pub fit: FitArgs,
    #[serde(default)]
    pub diagnose: DiagnoseArgs,
    #[serde(default)]
    pub plot: PlotArgs,
    #[serde(default)]
    pub study: StudyArgs,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::read(path, &e))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }
}

/// Field-wise `flag.or(file)`.
macro_rules! overlay {
    ($name:ident { $($field:ident),* $(,)? } $(bools { $($flag:ident),* })?) => {
        impl $name {
            pub fn overlay(self, file: $name) -> $name {
                $name {
                    $($field: self.$field.or(file.$field),)*
                    $($($flag: self.$flag || file.$flag,)*)?
                }
            }
        }
    };
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateArgs {
    /// Random-intercept standard deviation [default: 0.5].
    #[arg(long, allow_negative_numbers = true)]
    pub sigma1: Option<f64>,
    /// Number of subjects [default: 59].
    #[arg(long)]
    pub m1: Option<usize>,
    /// RNG seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV; metadata goes next to it with a `.json` extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reference panel whose trt/base/age columns are reused.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Comma-separated fixed effects, one per design term.
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<String>,
    /// Comma-separated design terms [default: intercept,lbase,trt,lbase_trt,lage].
    #[arg(long)]
    pub terms: Option<String>,
    /// SD of optional per-observation normal noise [default: 0].
    #[arg(long, allow_negative_numbers = true)]
    pub alpha_sd: Option<f64>,
}
overlay!(SimulateArgs { sigma1, m1, seed, out, covariates, beta, terms, alpha_sd });

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContaminateArgs {
    /// Input panel CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Contamination method, 1 to 6.
    #[arg(long, allow_negative_numbers = true)]
    pub method: Option<i64>,
    /// 1-based subject position [default: 1].
    #[arg(long, allow_negative_numbers = true)]
    pub target: Option<i64>,
    /// Output panel CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
overlay!(ContaminateArgs { input, method, target, out });

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitArgs {
    /// Input panel CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output fit JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated design terms.
    #[arg(long)]
    pub terms: Option<String>,
    /// Gauss–Hermite nodes [default: 25].
    #[arg(long)]
    pub quad_order: Option<usize>,
}
overlay!(FitArgs { input, out, terms, quad_order });

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseArgs {
    /// Input panel CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Fit JSON written by `fit` for the same panel.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Output diagnostics CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
overlay!(DiagnoseArgs { input, fit, out });

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotArgs {
    /// Diagnostics CSV written by `diagnose`.
    #[arg(long)]
    pub diag: Option<PathBuf>,
    /// Panel CSV, needed for trajectory plots.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Comma-separated plots: Ci, Ci_b, Ci_d, rri, cook1, scatter,
    /// trajectory [default: Ci,Ci_b,Ci_d,rri,scatter].
    #[arg(long)]
    pub stat: Option<String>,
    /// `all` or `balanced20` [default: all].
    #[arg(long)]
    pub select: Option<String>,
    /// Seed for subject selection [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated subject ids drawn in red; the first one is the
    /// trajectory highlight [default: 1].
    #[arg(long)]
    pub highlight: Option<String>,
    /// Black trajectories besides the highlighted one [default: 5].
    #[arg(long)]
    pub others: Option<usize>,
    /// Output directory [default: .].
    #[arg(long)]
    pub outdir: Option<PathBuf>,
    /// Dataset part of file names [default: diagnostics file stem].
    #[arg(long)]
    pub dataset: Option<String>,
    /// Method part of file names [default: clean].
    #[arg(long = "method-label")]
    #[serde(rename = "method_label")]
    pub method: Option<String>,
}
overlay!(PlotArgs { diag, panel, stat, select, seed, highlight, others, outdir, dataset, method });

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyArgs {
    /// Replicates per cell [default: 20].
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Base seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated contamination methods [default: 1,2,3,4].
    #[arg(long)]
    pub methods: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub outdir: Option<PathBuf>,
    /// Subjects per panel [default: 59].
    #[arg(long)]
    pub m1: Option<usize>,
    /// Gauss–Hermite nodes [default: 25].
    #[arg(long)]
    pub quad_order: Option<usize>,
    /// Comma-separated random-intercept SDs [default: 0.25,0.5,1].
    #[arg(long)]
    pub sigmas: Option<String>,
    /// Drop cells whose fit fails instead of aborting.
    #[arg(long)]
    #[serde(default)]
    pub skip_failures: bool,
}
overlay!(StudyArgs { replicates, seed, methods, outdir, m1, quad_order, sigmas } bools { skip_failures });
