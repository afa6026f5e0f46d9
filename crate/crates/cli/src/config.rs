//! Run configuration: a flat TOML document whose keys mirror the experiment
//! settings, overridden by command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use dp_sumquery::evaluation::{
    ExperimentConfig, Mechanism, RecursiveSettings, SyntheticParams, TruncationMode, WorkloadSpec,
};
use dp_sumquery::threshold::SvtThresholdParams;

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub workload: Option<String>,
    pub thresholds: Option<Vec<f64>>,
    pub thresholds_file: Option<PathBuf>,
    pub bucket_width: Option<f64>,
    pub domain_top: Option<f64>,
    pub epsilon: Option<f64>,
    pub rho: Option<f64>,
    pub mechanisms: Option<Vec<String>>,
    pub trunc: Option<String>,
    pub svt_ratio: Option<f64>,
    pub svt_growth: Option<f64>,
    pub svt_start: Option<f64>,
    pub recursive_beta: Option<f64>,
    pub recursive_theta: Option<f64>,
    pub recursive_mu: Option<f64>,
    pub trials: Option<usize>,
    pub delta: Option<f64>,
    pub seed: Option<u64>,
    pub isotonic: Option<bool>,
    pub data: Option<PathBuf>,
    pub synthetic: Option<bool>,
    pub synthetic_n: Option<usize>,
    pub synthetic_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML file with run settings; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Q1, Q2 or Q3
    #[arg(long, conflicts_with = "thresholds_file")]
    pub workload: Option<String>,
    /// File with one query threshold per line
    #[arg(long)]
    pub thresholds_file: Option<PathBuf>,
    #[arg(long)]
    pub bucket_width: Option<f64>,
    #[arg(long)]
    pub domain_top: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// none, svt or recursive
    #[arg(long)]
    pub trunc: Option<String>,
    /// Comma-separated: sqm, identity, workload, timm, tamm
    #[arg(long, value_delimiter = ',')]
    pub mechanisms: Option<Vec<String>>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub isotonic: Option<Switch>,
    /// One-column CSV of record values
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Generate the input instead of reading it
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub synthetic_n: Option<usize>,
    #[arg(long)]
    pub synthetic_seed: Option<u64>,
    #[arg(long, default_value = "results")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    Synthetic { n: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub experiment: ExperimentConfig,
    pub data: DataSource,
}

pub const DEFAULT_SYNTHETIC_N: usize = 40_000;

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // relative paths inside the file are relative to the file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.thresholds_file].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies flag values on top of the file.
    pub fn merge(mut self, args: &RunArgs) -> Self {
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = &args.$field {
                    self.$field = Some(v.clone());
                }
            )*};
        }
        take!(
            bucket_width,
            domain_top,
            epsilon,
            rho,
            trunc,
            mechanisms,
            trials,
            delta,
            seed,
            synthetic_n,
            synthetic_seed
        );
        if let Some(w) = &args.workload {
            self.workload = Some(w.clone());
            self.thresholds = None;
            self.thresholds_file = None;
        }
        if let Some(f) = &args.thresholds_file {
            self.thresholds_file = Some(f.clone());
            self.thresholds = None;
            self.workload = None;
        }
        if let Some(s) = args.isotonic {
            self.isotonic = Some(s == Switch::On);
        }
        if let Some(d) = &args.data {
            self.data = Some(d.clone());
            self.synthetic = None;
        }
        if args.synthetic {
            self.synthetic = Some(true);
            self.data = None;
        }
        self
    }

    pub fn resolve(&self) -> Result<ResolvedRun, CliError> {
        let defaults = ExperimentConfig::default();
        let sources = [
            self.workload.is_some(),
            self.thresholds.is_some(),
            self.thresholds_file.is_some(),
        ];
        if sources.iter().filter(|&&s| s).count() > 1 {
            return Err(CliError::Config(
                "workload: give only one of `workload`, `thresholds` and `thresholds_file`".into(),
            ));
        }
        let workload = if let Some(w) = &self.workload {
            w.parse::<WorkloadSpec>().map_err(core_config)?
        } else if let Some(t) = &self.thresholds {
            WorkloadSpec::Custom(t.clone())
        } else if let Some(path) = &self.thresholds_file {
            WorkloadSpec::Custom(read_thresholds(path)?)
        } else {
            defaults.workload.clone()
        };

        let mechanisms = match &self.mechanisms {
            Some(list) => list
                .iter()
                .map(|m| m.parse::<Mechanism>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(core_config)?,
            None => defaults.mechanisms.clone(),
        };
        let truncation = match &self.trunc {
            Some(t) => t.parse::<TruncationMode>().map_err(core_config)?,
            None => defaults.truncation,
        };

        let svt_default = SvtThresholdParams::default();
        let rec_default = RecursiveSettings::default();
        let experiment = ExperimentConfig {
            workload,
            bucket_width: self.bucket_width.unwrap_or(defaults.bucket_width),
            domain_top: self.domain_top.unwrap_or(defaults.domain_top),
            epsilon: self.epsilon.unwrap_or(defaults.epsilon),
            rho: self.rho.unwrap_or(defaults.rho),
            mechanisms,
            truncation,
            svt: SvtThresholdParams {
                ratio: self.svt_ratio.unwrap_or(svt_default.ratio),
                growth: self.svt_growth.unwrap_or(svt_default.growth),
                start: self.svt_start.unwrap_or(svt_default.start),
            },
            recursive: RecursiveSettings {
                beta: self.recursive_beta.or(rec_default.beta),
                theta_init: self.recursive_theta.unwrap_or(rec_default.theta_init),
                mu: self.recursive_mu.unwrap_or(rec_default.mu),
            },
            trials: self.trials.unwrap_or(defaults.trials),
            delta: self.delta.unwrap_or(defaults.delta),
            seed: self.seed.unwrap_or(defaults.seed),
            isotonic: self.isotonic.unwrap_or(defaults.isotonic),
        };
        experiment.validate().map_err(core_config)?;

        let data = match (&self.data, self.synthetic.unwrap_or(false)) {
            (Some(_), true) => {
                return Err(CliError::Config(
                    "data: give either `data` or `synthetic`, not both".into(),
                ))
            }
            (Some(path), false) => DataSource::File(path.clone()),
            (None, true) => {
                let n = self.synthetic_n.unwrap_or(DEFAULT_SYNTHETIC_N);
                if n == 0 {
                    return Err(CliError::Config("synthetic_n: must be positive".into()));
                }
                DataSource::Synthetic {
                    n,
                    seed: self.synthetic_seed.unwrap_or(experiment.seed),
                }
            }
            (None, false) => return Err(CliError::Config("data: pass `--data <csv>` or `--synthetic`".into())),
        };
        Ok(ResolvedRun { experiment, data })
    }
}

impl ResolvedRun {
    /// Fully explicit configuration that reproduces this run.
    pub fn snapshot(&self) -> FileConfig {
        let e = &self.experiment;
        let (workload, thresholds) = match &e.workload {
            WorkloadSpec::Custom(t) => (None, Some(t.clone())),
            w => (Some(format!("{w:?}")), None),
        };
        let (data, synthetic, synthetic_n, synthetic_seed) = match &self.data {
            DataSource::File(p) => (
                Some(std::path::absolute(p).unwrap_or_else(|_| p.clone())),
                None,
                None,
                None,
            ),
            DataSource::Synthetic { n, seed } => (None, Some(true), Some(*n), Some(*seed)),
        };
        FileConfig {
            workload,
            thresholds,
            thresholds_file: None,
            bucket_width: Some(e.bucket_width),
            domain_top: Some(e.domain_top),
            epsilon: Some(e.epsilon),
            rho: Some(e.rho),
            mechanisms: Some(e.mechanisms.iter().map(|m| m.name().to_string()).collect()),
            trunc: Some(
                match e.truncation {
                    TruncationMode::None => "none",
                    TruncationMode::Svt => "svt",
                    TruncationMode::Recursive => "recursive",
                }
                .into(),
            ),
            svt_ratio: Some(e.svt.ratio),
            svt_growth: Some(e.svt.growth),
            svt_start: Some(e.svt.start),
            recursive_beta: e.recursive.beta,
            recursive_theta: Some(e.recursive.theta_init),
            recursive_mu: Some(e.recursive.mu),
            trials: Some(e.trials),
            delta: Some(e.delta),
            seed: Some(e.seed),
            isotonic: Some(e.isotonic),
            data,
            synthetic,
            synthetic_n,
            synthetic_seed,
        }
    }

    pub fn synthetic_params(&self) -> SyntheticParams {
        SyntheticParams {
            domain_top: self.experiment.domain_top,
            ..SyntheticParams::default()
        }
    }
}

fn core_config(e: dp_sumquery::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn read_thresholds(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(line, l)| {
            l.parse::<f64>()
                .map_err(|_| CliError::Config(format!("{}: line {line}: `{l}` is not a number", path.display())))
        })
        .collect()
}
