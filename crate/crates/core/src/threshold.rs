//! Private selection of the truncation threshold θ.
//!
//! Two selectors are provided:
//!
//! * [`trun_svt`] walks a geometric sequence of candidate bounds
//!   `u_i = s·c^{i-1}` and uses the sparse vector technique to stop at the
//!   first bound whose count of records exceeds `r·N`.
//! * [`trun_recursive`] picks a clipping level from the grid
//!   `θ₀·μ^k` by report-noisy-min over a bias-plus-noise-scale objective.
//!   This is a self-contained reconstruction of the clipping-level phase of
//!   the recursive mechanism, not its full recursive query sequence.
//!
//! [`second_part_min`] is the minimisation performed by the recursive
//! mechanism's second phase on sum queries; it always equals the sum of the
//! dataset truncated at the same level.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::noise::{counting_query, laplace_sample, svt, RandomSource};
use crate::{Error, Result};

/// Upper bound on the SVT candidate list.
pub const SVT_MAX_CANDIDATES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvtThresholdParams {
    /// Fraction `r` of the records that should stay unclipped.
    pub ratio: f64,
    /// Growth factor `c` of the candidate sequence.
    pub growth: f64,
    /// First candidate `s`.
    pub start: f64,
}

impl Default for SvtThresholdParams {
    fn default() -> Self {
        Self {
            ratio: 0.998,
            growth: 1.2,
            start: 5e4,
        }
    }
}

impl SvtThresholdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio >= 0.0 && self.ratio < 1.0) {
            return Err(Error::param("svt.ratio", "must lie in [0, 1)"));
        }
        if !(self.growth > 1.0 && self.growth.is_finite()) {
            return Err(Error::param("svt.growth", "must be > 1"));
        }
        if !(self.start > 0.0 && self.start.is_finite()) {
            return Err(Error::param("svt.start", "must be positive"));
        }
        Ok(())
    }

    /// `u_i = s·c^{i-1}`, capped at [`SVT_MAX_CANDIDATES`] entries.
    pub fn candidates(&self) -> impl Iterator<Item = f64> + '_ {
        (0..SVT_MAX_CANDIDATES).map(move |i| self.start * self.growth.powi(i as i32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecursiveThresholdParams {
    pub beta: f64,
    pub theta_init: f64,
    pub mu: f64,
}

impl RecursiveThresholdParams {
    /// `β = 2ε₂/5`, `θ₀ = 5×10⁴`, `μ = 0.5`.
    pub fn with_default_beta(epsilon2: f64) -> Self {
        Self {
            beta: 2.0 * epsilon2 / 5.0,
            theta_init: 5e4,
            mu: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::param("recursive.beta", "must be positive"));
        }
        if !(self.theta_init > 0.0 && self.theta_init.is_finite()) {
            return Err(Error::param("recursive.theta_init", "must be positive"));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::param("recursive.mu", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// `θ₀·μ^k` for `k = 0, 1, …` while the value stays `≥ 1`; `θ₀` is
    /// always included.
    pub fn grid(&self) -> Vec<f64> {
        let mut grid = vec![self.theta_init];
        loop {
            let next = grid[grid.len() - 1] * self.mu;
            if next < 1.0 {
                break grid;
            }
            grid.push(next);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdWarning {
    /// SVT never crossed; θ is the last candidate.
    SvtExhausted,
    /// All records are zero (or there are none); θ is the smallest grid point.
    DegenerateData,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdChoice {
    pub theta: f64,
    pub warning: Option<ThresholdWarning>,
}

/// Selects θ with the sparse vector technique, consuming exactly `epsilon1`.
pub fn trun_svt(
    data: &Dataset,
    params: &SvtThresholdParams,
    epsilon1: f64,
    rng: &mut RandomSource,
) -> Result<ThresholdChoice> {
    params.validate()?;
    let threshold = params.ratio * data.len() as f64;
    let queries = params
        .candidates()
        .map(|u| move |d: &Dataset| counting_query(d, u) as f64);
    let crossed = svt(data, queries, threshold, epsilon1, rng)?;
    let (index, warning) = match crossed {
        Some(k) => (k, None),
        None => (SVT_MAX_CANDIDATES - 1, Some(ThresholdWarning::SvtExhausted)),
    };
    Ok(ThresholdChoice {
        theta: params.start * params.growth.powi(index as i32),
        warning,
    })
}

/// Selects a clipping level by report-noisy-min over the grid `θ₀·μ^k`.
///
/// Records are first clipped at `θ₀`, so the objective
/// `J(Δ) = Σ_t (min(t, θ₀) − min(t, Δ)) + Δ/β`
/// changes by at most `θ₀` when one record is added or removed, and every
/// score moves in the same direction. Each score is perturbed with
/// `Laplace(θ₀/ε₁)`, which makes the arg-min ε₁-DP.
pub fn trun_recursive(
    data: &Dataset,
    params: &RecursiveThresholdParams,
    epsilon1: f64,
    rng: &mut RandomSource,
) -> Result<ThresholdChoice> {
    params.validate()?;
    if !(epsilon1 > 0.0 && epsilon1.is_finite()) {
        return Err(Error::param("epsilon", "selection budget must be positive"));
    }
    let grid = params.grid();
    let smallest = grid[grid.len() - 1];
    if grid.len() == 1 {
        return Ok(ThresholdChoice {
            theta: params.theta_init,
            warning: None,
        });
    }

    let top = data.clipped_sum(params.theta_init);
    let scale = params.theta_init / epsilon1;
    let mut best = (f64::INFINITY, params.theta_init);
    for &delta in &grid {
        let bias = top - data.clipped_sum(delta);
        let score = bias + delta / params.beta + laplace_sample(scale, rng)?;
        if score < best.0 {
            best = (score, delta);
        }
    }

    if data.max().is_none_or(|m| m == 0.0) {
        return Ok(ThresholdChoice {
            theta: smallest,
            warning: Some(ThresholdWarning::DegenerateData),
        });
    }
    Ok(ThresholdChoice {
        theta: best.1,
        warning: None,
    })
}

/// `min { H_i + (N − i)·Δ : 0 ≤ i ≤ N }`, where `H_i` is the sum of the `i`
/// smallest records.
pub fn second_part_min(data: &Dataset, delta: f64) -> f64 {
    let n = data.len();
    let mut h = 0.0;
    let mut best = n as f64 * delta;
    for (i, &t) in data.records().iter().enumerate() {
        h += t;
        best = best.min(h + (n - i - 1) as f64 * delta);
    }
    best
}
