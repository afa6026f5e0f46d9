//! Repeated-trial experiments: synthetic data, the relative-error metric and
//! per-query aggregate statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, LogNormal, Pareto};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{vectorize, BucketSpec, Dataset, WorkloadMatrix};
use crate::isotonic::isotonic_l2;
use crate::mechanisms::{
    bqm_with, sqm_notrunc, sqm_trunc, BatchMechanism, MechanismResult, ThresholdSelector, ThresholdUsed, Truncation,
};
use crate::noise::{PrivacyBudget, RandomSource};
use crate::strategy::{StrategyCache, StrategySource};
use crate::threshold::SvtThresholdParams;
use crate::{Error, Result};

/// `|ŷ − y| / max(y, δ)`.
pub fn relative_error(estimate: f64, truth: f64, delta: f64) -> f64 {
    (estimate - truth).abs() / truth.max(delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Sqm,
    Identity,
    Workload,
    Timm,
    Tamm,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [Self::Sqm, Self::Identity, Self::Workload, Self::Timm, Self::Tamm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sqm => "sqm",
            Self::Identity => "identity",
            Self::Workload => "workload",
            Self::Timm => "timm",
            Self::Tamm => "tamm",
        }
    }

    pub fn batch(self) -> Option<BatchMechanism> {
        match self {
            Self::Sqm => None,
            Self::Identity => Some(BatchMechanism::Identity),
            Self::Workload => Some(BatchMechanism::Workload),
            Self::Timm => Some(BatchMechanism::Timm),
            Self::Tamm => Some(BatchMechanism::Tamm),
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::param("mechanisms", format!("unknown mechanism `{s}`")))
    }
}

/// Prefix-sum workload. `Q1`, `Q2` and `Q3` ask for every multiple of 800,
/// 8000 and 80000 up to `8×10⁵`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WorkloadSpec {
    Q1,
    Q2,
    Q3,
    #[serde(rename = "custom")]
    Custom(Vec<f64>),
}

impl WorkloadSpec {
    pub fn thresholds(&self) -> Vec<f64> {
        let stride = match self {
            Self::Q1 => 1,
            Self::Q2 => 10,
            Self::Q3 => 100,
            Self::Custom(t) => return t.clone(),
        };
        (1..=1000 / stride).map(|k| 800.0 * (k * stride) as f64).collect()
    }
}

impl FromStr for WorkloadSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "Q1" => Ok(Self::Q1),
            "Q2" => Ok(Self::Q2),
            "Q3" => Ok(Self::Q3),
            _ => Err(Error::param("workload", format!("expected Q1, Q2 or Q3, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruncationMode {
    None,
    Svt,
    Recursive,
}

impl FromStr for TruncationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "svt" => Ok(Self::Svt),
            "recursive" => Ok(Self::Recursive),
            _ => Err(Error::param(
                "trunc",
                format!("expected none, svt or recursive, got `{s}`"),
            )),
        }
    }
}

/// Recursive-selection settings; `beta = None` means `2ε₂/5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecursiveSettings {
    pub beta: Option<f64>,
    pub theta_init: f64,
    pub mu: f64,
}

impl Default for RecursiveSettings {
    fn default() -> Self {
        Self {
            beta: None,
            theta_init: 5e4,
            mu: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub workload: WorkloadSpec,
    pub bucket_width: f64,
    pub domain_top: f64,
    pub epsilon: f64,
    pub rho: f64,
    pub mechanisms: Vec<Mechanism>,
    pub truncation: TruncationMode,
    pub svt: SvtThresholdParams,
    pub recursive: RecursiveSettings,
    pub trials: usize,
    pub delta: f64,
    pub seed: u64,
    pub isotonic: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            workload: WorkloadSpec::Q1,
            bucket_width: 800.0,
            domain_top: 8e5,
            epsilon: 0.01,
            rho: 0.1,
            mechanisms: Mechanism::ALL.to_vec(),
            truncation: TruncationMode::Svt,
            svt: SvtThresholdParams::default(),
            recursive: RecursiveSettings::default(),
            trials: 100,
            delta: 100.0,
            seed: 0,
            isotonic: true,
        }
    }
}

impl ExperimentConfig {
    /// Number of buckets, `domain_top / bucket_width`, which must be a whole
    /// number.
    pub fn bucket_count(&self) -> Result<usize> {
        if !(self.bucket_width > 0.0 && self.bucket_width.is_finite()) {
            return Err(Error::param("bucket_width", "must be positive"));
        }
        if !(self.domain_top > 0.0 && self.domain_top.is_finite()) {
            return Err(Error::param("domain_top", "must be positive"));
        }
        let ratio = self.domain_top / self.bucket_width;
        let count = ratio.round();
        if (ratio - count).abs() > 1e-9 * ratio || count < 1.0 {
            return Err(Error::param(
                "bucket_width",
                format!(
                    "domain_top {} is not a multiple of {}",
                    self.domain_top, self.bucket_width
                ),
            ));
        }
        Ok(count as usize)
    }

    pub fn buckets(&self) -> Result<BucketSpec> {
        BucketSpec::uniform(self.bucket_width, self.bucket_count()?)
    }

    pub fn budget(&self) -> Result<PrivacyBudget> {
        PrivacyBudget::new(self.epsilon, self.rho)
    }

    pub fn truncation(&self) -> Truncation {
        match self.truncation {
            TruncationMode::None => Truncation::None,
            TruncationMode::Svt => Truncation::Select(ThresholdSelector::Svt(self.svt)),
            TruncationMode::Recursive => Truncation::Select(ThresholdSelector::Recursive {
                beta: self.recursive.beta,
                theta_init: self.recursive.theta_init,
                mu: self.recursive.mu,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bucket_count()?;
        self.budget()?;
        if self.truncation != TruncationMode::None && self.rho == 0.0 {
            return Err(Error::param("rho", "truncation needs rho > 0"));
        }
        if let Truncation::Select(sel) = self.truncation() {
            sel.validate()?;
        }
        if self.mechanisms.is_empty() {
            return Err(Error::param("mechanisms", "at least one mechanism is required"));
        }
        for (i, m) in self.mechanisms.iter().enumerate() {
            if self.mechanisms[..i].contains(m) {
                return Err(Error::param("mechanisms", format!("`{m}` listed twice")));
            }
        }
        if self.trials == 0 {
            return Err(Error::param("trials", "must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::param("delta", "must be positive"));
        }
        let thresholds = self.workload.thresholds();
        if thresholds.is_empty() {
            return Err(Error::param("workload", "needs at least one threshold"));
        }
        if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::param("workload", "thresholds must be strictly increasing"));
        }
        Ok(())
    }
}

/// Income-like law: log-normal body with a Pareto tail, clipped to
/// `[0, domain_top]` and rounded to whole units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub median: f64,
    pub sigma: f64,
    /// Share of records drawn from the tail.
    pub tail_fraction: f64,
    pub tail_scale: f64,
    pub tail_shape: f64,
    pub domain_top: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            median: 12_000.0,
            sigma: 0.45,
            tail_fraction: 0.001,
            tail_scale: 5e4,
            tail_shape: 1.2,
            domain_top: 8e5,
        }
    }
}

pub fn generate_synthetic(n: usize, params: &SyntheticParams, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::param("n", "must be positive"));
    }
    if !(params.median > 0.0 && params.median.is_finite()) {
        return Err(Error::param("median", "must be positive"));
    }
    if !(params.sigma >= 0.0 && params.sigma.is_finite()) {
        return Err(Error::param("sigma", "must be finite and >= 0"));
    }
    if !(0.0..=1.0).contains(&params.tail_fraction) {
        return Err(Error::param("tail_fraction", "must lie in [0, 1]"));
    }
    if !(params.domain_top > 0.0 && params.domain_top.is_finite()) {
        return Err(Error::param("domain_top", "must be positive"));
    }
    let body = LogNormal::new(params.median.ln(), params.sigma).map_err(|e| Error::param("sigma", e.to_string()))?;
    let tail = Pareto::new(params.tail_scale, params.tail_shape).map_err(|e| Error::param("tail", e.to_string()))?;
    let mut rng = RandomSource::new(seed);
    let records = (0..n)
        .map(|_| {
            let v = if rand::Rng::random::<f64>(&mut rng) < params.tail_fraction {
                tail.sample(&mut rng)
            } else {
                body.sample(&mut rng)
            };
            v.clamp(0.0, params.domain_top).round().min(params.domain_top.floor())
        })
        .collect();
    Dataset::new(records)
}

/// Mean and 5th/95th nearest-rank percentiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub p5: f64,
    pub p95: f64,
}

impl Summary {
    /// Order-independent: values are sorted before summing.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        Some(Self {
            mean,
            p5: nearest_rank(&sorted, 5.0),
            p95: nearest_rank(&sorted, 95.0),
        })
    }
}

/// Smallest value with at least `pct`% of the sample at or below it.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryStats {
    pub threshold: f64,
    pub true_answer: f64,
    pub answer: Summary,
    pub relative_error: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismReport {
    pub mechanism: Mechanism,
    /// Empty when every trial failed.
    pub queries: Vec<QueryStats>,
    pub trials_ok: usize,
    /// `(trial, message)` for each failed trial.
    pub failures: Vec<(usize, String)>,
    /// Warning text and the number of trials that raised it.
    pub warnings: BTreeMap<String, usize>,
    /// Shared θ per successful trial, for truncated batch mechanisms.
    pub thresholds_used: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub thresholds: Vec<f64>,
    pub true_answers: Vec<f64>,
    pub mechanisms: Vec<MechanismReport>,
}

impl ExperimentReport {
    pub fn get(&self, mechanism: Mechanism) -> Option<&MechanismReport> {
        self.mechanisms.iter().find(|r| r.mechanism == mechanism)
    }
}

/// Raw per-trial output, before aggregation.
#[derive(Debug, Clone)]
pub struct TrialOutput {
    pub mechanism: Mechanism,
    pub result: Result<MechanismResult>,
}

/// Runs one trial of every configured mechanism.
///
/// Batch mechanisms draw from stream `2·trial` of the seed and SQM from
/// stream `2·trial + 1`, so each trial is reproducible on its own.
pub fn run_trial(
    cfg: &ExperimentConfig,
    data: &Dataset,
    buckets: &BucketSpec,
    workload: &WorkloadMatrix,
    strategies: &dyn StrategySource,
    trial: u64,
) -> Vec<TrialOutput> {
    let budget = match cfg.budget() {
        Ok(b) => b,
        Err(e) => {
            return cfg
                .mechanisms
                .iter()
                .map(|&mechanism| TrialOutput {
                    mechanism,
                    result: Err(e.clone()),
                })
                .collect()
        }
    };
    let truncation = cfg.truncation();
    let batch: Vec<BatchMechanism> = cfg.mechanisms.iter().filter_map(|m| m.batch()).collect();
    let mut batch_results = if batch.is_empty() {
        Ok(Vec::new())
    } else {
        let mut rng = RandomSource::stream(cfg.seed, 2 * trial);
        bqm_with(
            data,
            buckets,
            workload,
            &budget,
            &truncation,
            &batch,
            strategies,
            &mut rng,
        )
    };

    cfg.mechanisms
        .iter()
        .map(|&mechanism| {
            let result = match mechanism.batch() {
                None => {
                    let mut rng = RandomSource::stream(cfg.seed, 2 * trial + 1);
                    match &truncation {
                        Truncation::None => sqm_notrunc(data, workload.thresholds(), cfg.epsilon, &mut rng),
                        Truncation::Select(sel) => sqm_trunc(data, workload.thresholds(), &budget, sel, &mut rng),
                    }
                }
                Some(b) => match &mut batch_results {
                    Ok(results) => {
                        let idx = results.iter().position(|(m, _)| *m == b).expect("requested mechanism");
                        Ok(results[idx].1.clone())
                    }
                    Err(e) => Err(e.clone()),
                },
            };
            TrialOutput {
                mechanism,
                result: result.map(|mut r| {
                    if cfg.isotonic {
                        r.answers = isotonic_l2(&r.answers);
                    }
                    r
                }),
            }
        })
        .collect()
}

/// `run_experiment` with a fresh strategy cache.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset) -> Result<ExperimentReport> {
    run_experiment_with(cfg, data, &StrategyCache::new())
}

/// Runs `cfg.trials` independent trials in parallel and aggregates the
/// relative errors against the untruncated answers `W·D·x`.
///
/// Configuration and data errors are returned; a mechanism error only fails
/// its own trial and is recorded in the report.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    data: &Dataset,
    strategies: &dyn StrategySource,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let buckets = cfg.buckets()?;
    let thresholds = cfg.workload.thresholds();
    let workload = WorkloadMatrix::prefix(&thresholds, &buckets)?;
    let (x, d) = vectorize(data, &buckets)?;
    let truth: Vec<f64> = (workload.weighted(d.diagonal()) * x.to_vector())
        .iter()
        .copied()
        .collect();

    let trials: Vec<Vec<TrialOutput>> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| run_trial(cfg, data, &buckets, &workload, strategies, t))
        .collect();

    let mechanisms = cfg
        .mechanisms
        .iter()
        .enumerate()
        .map(|(slot, &mechanism)| {
            let mut answers = Vec::new();
            let mut failures = Vec::new();
            let mut warnings = BTreeMap::new();
            let mut thresholds_used = Vec::new();
            for (t, outputs) in trials.iter().enumerate() {
                match &outputs[slot].result {
                    Ok(r) => {
                        let mut seen: Vec<String> = r.warnings.iter().map(|w| w.to_string()).collect();
                        seen.sort();
                        seen.dedup();
                        for w in seen {
                            *warnings.entry(w).or_insert(0) += 1;
                        }
                        if let ThresholdUsed::Shared(theta) = r.threshold_used {
                            thresholds_used.push(theta);
                        }
                        answers.push(r.answers.clone());
                    }
                    Err(e) => failures.push((t, e.to_string())),
                }
            }
            MechanismReport {
                mechanism,
                queries: aggregate(&thresholds, &truth, &answers, cfg.delta),
                trials_ok: answers.len(),
                failures,
                warnings,
                thresholds_used,
            }
        })
        .collect();

    Ok(ExperimentReport {
        thresholds,
        true_answers: truth,
        mechanisms,
    })
}

fn aggregate(thresholds: &[f64], truth: &[f64], answers: &[Vec<f64>], delta: f64) -> Vec<QueryStats> {
    if answers.is_empty() {
        return Vec::new();
    }
    (0..thresholds.len())
        .map(|j| {
            let raw: Vec<f64> = answers.iter().map(|a| a[j]).collect();
            let rel: Vec<f64> = raw.iter().map(|&a| relative_error(a, truth[j], delta)).collect();
            QueryStats {
                threshold: thresholds[j],
                true_answer: truth[j],
                answer: Summary::of(&raw).expect("non-empty"),
                relative_error: Summary::of(&rel).expect("non-empty"),
            }
        })
        .collect()
}
