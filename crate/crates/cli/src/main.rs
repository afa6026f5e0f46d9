mod config;
mod error;
mod ingest;
mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use dp_sumquery::data::Dataset;
use dp_sumquery::evaluation::{generate_synthetic, run_experiment, SyntheticParams};

use config::{DataSource, FileConfig, ResolvedRun, RunArgs};
use error::CliError;
use output::{write_mechanism_csv, MechanismEntry, OutputGuard, RunManifest};

const THREADS_ENV: &str = "DP_SUMQUERY_THREADS";

#[derive(Parser, Debug)]
#[command(version, about = "Private prefix-sum experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment and write one CSV per mechanism plus a manifest
    Run(Box<RunArgs>),
    /// Write a synthetic income-like dataset as CSV
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8e5)]
        domain_top: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(&args),
        Command::GenData {
            n,
            seed,
            domain_top,
            out,
        } => gen_data(n, seed, domain_top, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn gen_data(n: usize, seed: u64, domain_top: f64, out: &Path) -> Result<(), CliError> {
    let params = SyntheticParams {
        domain_top,
        ..SyntheticParams::default()
    };
    let data = generate_synthetic(n, &params, seed).map_err(|e| CliError::Config(e.to_string()))?;
    write_dataset(out, &data)?;
    eprintln!("wrote {} records to {}", data.len(), out.display());
    Ok(())
}

fn write_dataset(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let write_err = |e: csv::Error| CliError::Write {
        path: path.to_owned(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(write_err)?;
    w.write_record(["income"]).map_err(write_err)?;
    for v in data.records() {
        w.write_record([v.to_string()]).map_err(write_err)?;
    }
    w.flush().map_err(|e| CliError::Write {
        path: path.to_owned(),
        source: e,
    })
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("{THREADS_ENV}: expected a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(args: &RunArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let resolved = file.merge(args).resolve()?;
    let data = load_data(&resolved)?;
    eprintln!("{} records", data.len());

    let pool = thread_pool()?;
    let report = pool.install(|| run_experiment(&resolved.experiment, &data))?;

    let out_dir = &args.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Write {
        path: out_dir.clone(),
        source: e,
    })?;
    let mut guard = OutputGuard::default();
    let mut entries = BTreeMap::new();
    for m in &report.mechanisms {
        if m.trials_ok == 0 {
            let first = m.failures.first().map_or("", |(_, msg)| msg.as_str());
            return Err(CliError::Runtime(format!(
                "{}: every trial failed ({first})",
                m.mechanism
            )));
        }
        let path = out_dir.join(format!("{}.csv", m.mechanism));
        guard.track(path.clone());
        write_mechanism_csv(&path, m)?;
        for (trial, msg) in &m.failures {
            eprintln!("warning: {} trial {trial} failed: {msg}", m.mechanism);
        }
        for (w, count) in &m.warnings {
            eprintln!("warning: {}: {w} ({count} trials)", m.mechanism);
        }
        entries.insert(
            m.mechanism.to_string(),
            MechanismEntry {
                output: path,
                trials_ok: m.trials_ok,
                failures: m.failures.clone(),
                warnings: m.warnings.clone(),
            },
        );
    }

    let snapshot = resolved.snapshot();
    let config_file = out_dir.join("config.toml");
    guard.track(config_file.clone());
    let config_text = toml::to_string(&snapshot).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&config_file, config_text.as_bytes())?;

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        seed: resolved.experiment.seed,
        config_file,
        config: toml::Table::try_from(&snapshot).map_err(|e| CliError::Runtime(e.to_string()))?,
        records: data.len(),
        mechanisms: entries,
        duration_secs: start.elapsed().as_secs_f64(),
    };
    let manifest_path = out_dir.join("manifest.json");
    guard.track(manifest_path.clone());
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&manifest_path, json.as_bytes())?;
    guard.commit();
    eprintln!("results in {}", out_dir.display());
    Ok(())
}

fn load_data(run: &ResolvedRun) -> Result<Dataset, CliError> {
    match &run.data {
        DataSource::File(path) => ingest::ingest_csv(path),
        DataSource::Synthetic { n, seed } => {
            generate_synthetic(*n, &run.synthetic_params(), *seed).map_err(|e| CliError::Config(e.to_string()))
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Write {
        path: path.to_owned(),
        source: e,
    })
}
