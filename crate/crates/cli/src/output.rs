//! Result tables and the run manifest.

use std::path::{Path, PathBuf};

use serde::Serialize;

use dp_sumquery::evaluation::MechanismReport;

use crate::error::CliError;

pub const CSV_HEADER: [&str; 6] = [
    "query_threshold",
    "true_answer",
    "mean_answer",
    "mean_rel_err",
    "p5_rel_err",
    "p95_rel_err",
];

/// Plain decimal with exactly nine significant digits.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{:.8e}", v.abs());
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let body = if exp >= 8 {
        format!("{digits}{}", "0".repeat((exp - 8) as usize))
    } else if exp >= 0 {
        let (int, frac) = digits.split_at(exp as usize + 1);
        format!("{int}.{frac}")
    } else {
        format!("0.{}{digits}", "0".repeat((-exp - 1) as usize))
    };
    if v < 0.0 {
        format!("-{body}")
    } else {
        body
    }
}

pub fn write_mechanism_csv(path: &Path, report: &MechanismReport) -> Result<(), CliError> {
    let write_err = |e: csv::Error| CliError::Write {
        path: path.to_owned(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(write_err)?;
    w.write_record(CSV_HEADER).map_err(write_err)?;
    for q in &report.queries {
        w.write_record([
            format_number(q.threshold),
            format_number(q.true_answer),
            format_number(q.answer.mean),
            format_number(q.relative_error.mean),
            format_number(q.relative_error.p5),
            format_number(q.relative_error.p95),
        ])
        .map_err(write_err)?;
    }
    w.flush().map_err(|e| CliError::Write {
        path: path.to_owned(),
        source: e,
    })
}

#[derive(Debug, Serialize)]
pub struct MechanismEntry {
    pub output: PathBuf,
    pub trials_ok: usize,
    pub failures: Vec<(usize, String)>,
    pub warnings: std::collections::BTreeMap<String, usize>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: &'static str,
    pub seed: u64,
    /// Replayable with `run --config`.
    pub config_file: PathBuf,
    pub config: toml::Table,
    pub records: usize,
    pub mechanisms: std::collections::BTreeMap<String, MechanismEntry>,
    pub duration_secs: f64,
}

/// Files written so far; removed again unless the run completes.
#[derive(Debug, Default)]
pub struct OutputGuard {
    files: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    pub fn track(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.committed {
            for f in &self.files {
                let _ = std::fs::remove_file(f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_number(0.0), "0");
        assert_eq!(format_number(-0.0), "0");
        assert_eq!(format_number(1.0), "1.00000000");
        assert_eq!(format_number(800.0), "800.000000");
        assert_eq!(format_number(123_456_789.0), "123456789");
        assert_eq!(format_number(5.3e9), "5300000000");
        assert_eq!(format_number(0.1), "0.100000000");
        assert_eq!(format_number(-0.001_234_567_891), "-0.00123456789");
        assert_eq!(format_number(9.999_999_999_9), "10.0000000");
        assert_eq!(format_number(1.0 / 3.0), "0.333333333");
    }
}
