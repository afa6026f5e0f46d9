//! Private answering of prefix-sum workloads.
//!
//! Two families: the single-query mechanism (SQM), which answers every query
//! on its own share of the budget, and the batch mechanisms (identity,
//! workload, TiMM, TaMM), which work on the bucketized count vector and share
//! one truncation threshold through [`bqm`].

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{vectorize, BucketSpec, CountVector, Dataset, TruncatedWeightMatrix, WorkloadMatrix};
use crate::noise::{
    laplace_sample, sensitivity_l1, standard_laplace_vector, BudgetLedger, Epsilon, PrivacyBudget, RandomSource,
};
use crate::strategy::{least_squares, FreshStrategies, StrategyMatrix, StrategySource};
use crate::threshold::{
    trun_recursive, trun_svt, RecursiveThresholdParams, SvtThresholdParams, ThresholdChoice, ThresholdWarning,
};
use crate::{Error, Result};

pub const SELECTION: &str = "threshold_selection";
pub const MEASUREMENT: &str = "measurement";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MechanismWarning {
    Threshold(ThresholdWarning),
    /// The strategy search failed and the identity strategy was used.
    StrategyFallback,
    /// SQM answered this query without truncation because selection failed.
    SelectorFallback {
        query: usize,
    },
}

impl fmt::Display for MechanismWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Threshold(ThresholdWarning::SvtExhausted) => {
                f.write_str("SVT exhausted its candidates; the last candidate was used")
            }
            Self::Threshold(ThresholdWarning::DegenerateData) => {
                f.write_str("all records are zero; the smallest grid threshold was used")
            }
            Self::StrategyFallback => f.write_str("strategy search failed; identity strategy used"),
            Self::SelectorFallback { query } => {
                write!(f, "query {query}: threshold selection failed; answered untruncated")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdUsed {
    None,
    Shared(f64),
    /// One entry per query; `None` where the query was answered untruncated.
    PerQuery(Vec<Option<f64>>),
}

#[derive(Debug, Clone)]
pub struct MechanismResult {
    pub answers: Vec<f64>,
    pub threshold_used: ThresholdUsed,
    pub ledger: BudgetLedger,
    pub warnings: Vec<MechanismWarning>,
}

/// How the truncation threshold θ is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSelector {
    Svt(SvtThresholdParams),
    /// `beta = None` means `2ε₂/5` for whatever `ε₂` the call runs with.
    Recursive {
        beta: Option<f64>,
        theta_init: f64,
        mu: f64,
    },
    /// Externally supplied θ; consumes no data access.
    Fixed(f64),
}

impl ThresholdSelector {
    pub fn recursive_default() -> Self {
        Self::Recursive {
            beta: None,
            theta_init: 5e4,
            mu: 0.5,
        }
    }

    fn needs_budget(&self) -> bool {
        !matches!(self, Self::Fixed(_))
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Svt(p) => p.validate(),
            Self::Recursive { beta, theta_init, mu } => RecursiveThresholdParams {
                beta: beta.unwrap_or(1.0),
                theta_init,
                mu,
            }
            .validate(),
            Self::Fixed(theta) if theta >= 0.0 && theta.is_finite() => Ok(()),
            Self::Fixed(theta) => Err(Error::param("theta", format!("must be finite and >= 0, got {theta}"))),
        }
    }

    /// Runs selection on `ε₁` of `budget`.
    pub fn select(&self, data: &Dataset, budget: &PrivacyBudget, rng: &mut RandomSource) -> Result<ThresholdChoice> {
        if self.needs_budget() && budget.epsilon1_exact().is_zero() {
            return Err(Error::param("rho", "threshold selection needs rho > 0"));
        }
        match *self {
            Self::Svt(p) => trun_svt(data, &p, budget.epsilon1(), rng),
            Self::Recursive { beta, theta_init, mu } => {
                let params = RecursiveThresholdParams {
                    beta: beta.unwrap_or(2.0 * budget.epsilon2() / 5.0),
                    theta_init,
                    mu,
                };
                trun_recursive(data, &params, budget.epsilon1(), rng)
            }
            Self::Fixed(theta) => {
                self.validate()?;
                Ok(ThresholdChoice { theta, warning: None })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// No truncation; the whole budget goes to measurement.
    None,
    Select(ThresholdSelector),
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::param("epsilon", format!("must be positive, got {epsilon}")))
    }
}

fn laplace_or_zero(scale: f64, rng: &mut RandomSource) -> Result<f64> {
    if scale == 0.0 {
        Ok(0.0)
    } else {
        laplace_sample(scale, rng)
    }
}

/// Untruncated SQM: every prefix query gets `ε/p` and Laplace noise scaled
/// to its own sensitivity `σ_j`.
pub fn sqm_notrunc(
    data: &Dataset,
    thresholds: &[f64],
    epsilon: f64,
    rng: &mut RandomSource,
) -> Result<MechanismResult> {
    check_epsilon(epsilon)?;
    if thresholds.is_empty() {
        return Err(Error::param("thresholds", "must be non-empty"));
    }
    let total = Epsilon::from_f64(epsilon)?;
    let per_query = total.divide(thresholds.len());
    let eps = per_query.to_f64();
    let answers = thresholds
        .iter()
        .map(|&sigma| Ok(data.prefix_sum(sigma) + laplace_or_zero(sigma.max(0.0) / eps, rng)?))
        .collect::<Result<Vec<_>>>()?;
    let mut ledger = BudgetLedger::new(total);
    ledger.charge(MEASUREMENT, (0..thresholds.len()).map(|_| per_query.clone()).sum());
    Ok(MechanismResult {
        answers,
        threshold_used: ThresholdUsed::None,
        ledger,
        warnings: Vec::new(),
    })
}

/// Truncated SQM: query `j` gets `ε/p`, spends the `ρ` share of it choosing
/// `θ_j` and the rest answering either the truncated query (`θ_j < σ_j`) or
/// the plain one.
pub fn sqm_trunc(
    data: &Dataset,
    thresholds: &[f64],
    budget: &PrivacyBudget,
    selector: &ThresholdSelector,
    rng: &mut RandomSource,
) -> Result<MechanismResult> {
    if thresholds.is_empty() {
        return Err(Error::param("thresholds", "must be non-empty"));
    }
    selector.validate()?;
    let per_query = PrivacyBudget::from_exact(budget.total_exact().divide(thresholds.len()), budget.rho())?;
    let eps2 = per_query.epsilon2();
    check_epsilon(eps2)?;

    let mut answers = Vec::with_capacity(thresholds.len());
    let mut used = Vec::with_capacity(thresholds.len());
    let mut warnings = Vec::new();
    for (j, &sigma) in thresholds.iter().enumerate() {
        let choice = selector.select(data, &per_query, rng)?;
        let theta = match choice.warning {
            None => Some(choice.theta),
            Some(w) => {
                warnings.push(MechanismWarning::Threshold(w));
                warnings.push(MechanismWarning::SelectorFallback { query: j });
                None
            }
        };
        let answer = match theta {
            Some(theta) if theta < sigma => {
                data.truncated_prefix_sum(theta, sigma) + laplace_or_zero(theta / eps2, rng)?
            }
            _ => data.prefix_sum(sigma) + laplace_or_zero(sigma.max(0.0) / eps2, rng)?,
        };
        answers.push(answer);
        used.push(theta);
    }

    let p = thresholds.len();
    let mut ledger = BudgetLedger::new(budget.total_exact().clone());
    if !per_query.epsilon1_exact().is_zero() {
        ledger.charge(SELECTION, (0..p).map(|_| per_query.epsilon1_exact().clone()).sum());
    }
    ledger.charge(MEASUREMENT, (0..p).map(|_| per_query.epsilon2_exact().clone()).sum());
    Ok(MechanismResult {
        answers,
        threshold_used: ThresholdUsed::PerQuery(used),
        ledger,
        warnings,
    })
}

fn check_batch(w: &WorkloadMatrix, t: &TruncatedWeightMatrix, x: &CountVector, eps2: f64) -> Result<()> {
    check_epsilon(eps2)?;
    for found in [t.dim(), x.len()] {
        if found != w.buckets() {
            return Err(Error::DimensionMismatch {
                expected: w.buckets(),
                found,
            });
        }
    }
    Ok(())
}

fn to_vec(v: DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// `W·T·(x + b̃/ε₂)`.
pub fn identity_mech(
    w: &WorkloadMatrix,
    t: &TruncatedWeightMatrix,
    x: &CountVector,
    eps2: f64,
    rng: &mut RandomSource,
) -> Result<Vec<f64>> {
    check_batch(w, t, x, eps2)?;
    let noisy = x.to_vector() + standard_laplace_vector(x.len(), rng) / eps2;
    Ok(to_vec(w.weighted(t.diagonal()) * noisy))
}

/// `‖W·T‖₁ / ε₂`, the per-answer noise scale of [`workload_mech`].
pub fn workload_noise_scale(w: &WorkloadMatrix, t: &TruncatedWeightMatrix, eps2: f64) -> f64 {
    sensitivity_l1(&w.weighted(t.diagonal())) / eps2
}

/// `W·T·x + (‖W·T‖₁/ε₂)·b̃`.
pub fn workload_mech(
    w: &WorkloadMatrix,
    t: &TruncatedWeightMatrix,
    x: &CountVector,
    eps2: f64,
    rng: &mut RandomSource,
) -> Result<Vec<f64>> {
    check_batch(w, t, x, eps2)?;
    let wt = w.weighted(t.diagonal());
    let scale = sensitivity_l1(&wt) / eps2;
    let noise = standard_laplace_vector(w.queries(), rng) * scale;
    Ok(to_vec(wt * x.to_vector() + noise))
}

/// Truncation-independent matrix mechanism with a given strategy for `W`:
/// measure `A·T·x` with noise scaled to `‖A·T‖₁`, reconstruct `T·x` by least
/// squares and return `W` applied to it.
pub fn timm_with_strategy(
    w: &WorkloadMatrix,
    t: &TruncatedWeightMatrix,
    x: &CountVector,
    eps2: f64,
    a: &StrategyMatrix,
    rng: &mut RandomSource,
) -> Result<Vec<f64>> {
    check_batch(w, t, x, eps2)?;
    if a.cols() != w.buckets() {
        return Err(Error::DimensionMismatch {
            expected: w.buckets(),
            found: a.cols(),
        });
    }
    let at = scale_columns(a.matrix(), t.diagonal());
    let scale = sensitivity_l1(&at) / eps2;
    let z = &at * x.to_vector() + standard_laplace_vector(a.rows(), rng) * scale;
    let tx = least_squares(a, &z)?;
    Ok(to_vec(w.matrix() * tx))
}

/// Truncation-aware matrix mechanism with a given strategy for `W·T`:
/// measure `A·x` with noise scaled to `‖A‖₁`, reconstruct `x` by least
/// squares and return `W·T` applied to it.
pub fn tamm_with_strategy(
    w: &WorkloadMatrix,
    t: &TruncatedWeightMatrix,
    x: &CountVector,
    eps2: f64,
    a: &StrategyMatrix,
    rng: &mut RandomSource,
) -> Result<Vec<f64>> {
    check_batch(w, t, x, eps2)?;
    if a.cols() != w.buckets() {
        return Err(Error::DimensionMismatch {
            expected: w.buckets(),
            found: a.cols(),
        });
    }
    let scale = a.sensitivity() / eps2;
    let z = a.matrix() * x.to_vector() + standard_laplace_vector(a.rows(), rng) * scale;
    let x_hat = least_squares(a, &z)?;
    Ok(to_vec(w.weighted(t.diagonal()) * x_hat))
}

fn scale_columns(m: &DMatrix<f64>, diag: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (mut col, &d) in out.column_iter_mut().zip(diag.iter()) {
        col *= d;
    }
    out
}

/// [`timm_with_strategy`] with the strategy `greedy_h(W)` from `strategies`.
/// The flag reports a strategy fallback.
pub fn timm(
    w: &WorkloadMatrix,
    t: &TruncatedWeightMatrix,
    x: &CountVector,
    eps2: f64,
    strategies: &dyn StrategySource,
    rng: &mut RandomSource,
) -> Result<(Vec<f64>, bool)> {
    let choice = strategies.strategy_for(w.matrix())?;
    Ok((
        timm_with_strategy(w, t, x, eps2, &choice.strategy, rng)?,
        choice.fallback,
    ))
}

/// [`tamm_with_strategy`] with the strategy `greedy_h(W·T)` from `strategies`.
pub fn tamm(
    w: &WorkloadMatrix,
    t: &TruncatedWeightMatrix,
    x: &CountVector,
    eps2: f64,
    strategies: &dyn StrategySource,
    rng: &mut RandomSource,
) -> Result<(Vec<f64>, bool)> {
    check_batch(w, t, x, eps2)?;
    let choice = strategies.strategy_for(&w.weighted(t.diagonal()))?;
    Ok((
        tamm_with_strategy(w, t, x, eps2, &choice.strategy, rng)?,
        choice.fallback,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMechanism {
    Identity,
    Workload,
    Timm,
    Tamm,
}

impl BatchMechanism {
    pub const ALL: [BatchMechanism; 4] = [Self::Identity, Self::Workload, Self::Timm, Self::Tamm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Workload => "workload",
            Self::Timm => "timm",
            Self::Tamm => "tamm",
        }
    }
}

impl fmt::Display for BatchMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BatchMechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::param("mechanism", format!("unknown batch mechanism `{s}`")))
    }
}

/// Batch query mechanism with every batch mechanism.
pub fn bqm(
    data: &Dataset,
    buckets: &BucketSpec,
    workload: &WorkloadMatrix,
    budget: &PrivacyBudget,
    truncation: &Truncation,
    rng: &mut RandomSource,
) -> Result<Vec<(BatchMechanism, MechanismResult)>> {
    bqm_with(
        data,
        buckets,
        workload,
        budget,
        truncation,
        &BatchMechanism::ALL,
        &FreshStrategies,
        rng,
    )
}

/// Batch query mechanism: vectorize once, select θ once on `ε₁`, then answer
/// with each requested mechanism on `ε₂`.
///
/// Every mechanism draws its noise from a fresh copy of the same seeded
/// stream, so their errors are positively coupled. Each result on its own is
/// ε-DP; releasing several of them together is not.
#[allow(clippy::too_many_arguments)]
pub fn bqm_with(
    data: &Dataset,
    buckets: &BucketSpec,
    workload: &WorkloadMatrix,
    budget: &PrivacyBudget,
    truncation: &Truncation,
    mechanisms: &[BatchMechanism],
    strategies: &dyn StrategySource,
    rng: &mut RandomSource,
) -> Result<Vec<(BatchMechanism, MechanismResult)>> {
    if workload.buckets() != buckets.len() {
        return Err(Error::DimensionMismatch {
            expected: buckets.len(),
            found: workload.buckets(),
        });
    }
    let (x, d) = vectorize(data, buckets)?;
    let mut ledger = BudgetLedger::new(budget.total_exact().clone());
    let mut warnings = Vec::new();
    let (t, eps2, threshold_used) = match truncation {
        Truncation::None => {
            ledger.charge(MEASUREMENT, budget.total_exact().clone());
            (d.untruncated(), budget.epsilon(), ThresholdUsed::None)
        }
        Truncation::Select(selector) => {
            selector.validate()?;
            check_epsilon(budget.epsilon2())?;
            let choice = selector.select(data, budget, rng)?;
            warnings.extend(choice.warning.map(MechanismWarning::Threshold));
            if !budget.epsilon1_exact().is_zero() {
                ledger.charge(SELECTION, budget.epsilon1_exact().clone());
            }
            ledger.charge(MEASUREMENT, budget.epsilon2_exact().clone());
            (
                d.truncate(choice.theta)?,
                budget.epsilon2(),
                ThresholdUsed::Shared(choice.theta),
            )
        }
    };

    let noise_seed = rng.fork_seed();
    mechanisms
        .iter()
        .map(|&mech| {
            let mut noise = RandomSource::new(noise_seed);
            let mut warnings = warnings.clone();
            let answers = match mech {
                BatchMechanism::Identity => identity_mech(workload, &t, &x, eps2, &mut noise)?,
                BatchMechanism::Workload => workload_mech(workload, &t, &x, eps2, &mut noise)?,
                BatchMechanism::Timm | BatchMechanism::Tamm => {
                    let run = if mech == BatchMechanism::Timm { timm } else { tamm };
                    let (answers, fallback) = run(workload, &t, &x, eps2, strategies, &mut noise)?;
                    if fallback {
                        warnings.push(MechanismWarning::StrategyFallback);
                    }
                    answers
                }
            };
            Ok((
                mech,
                MechanismResult {
                    answers,
                    threshold_used: threshold_used.clone(),
                    ledger: ledger.clone(),
                    warnings,
                },
            ))
        })
        .collect()
}
