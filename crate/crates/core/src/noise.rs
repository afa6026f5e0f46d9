//! Laplace noise, L1 sensitivity, counting queries, the sparse vector
//! technique and privacy-budget accounting.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, Sub};

use nalgebra::{DMatrix, DVector};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::data::Dataset;
use crate::{Error, Result};

/// Seeded, single-owner pseudo-random stream.
///
/// Streams derived from the same seed with different stream ids are
/// independent, which is how per-trial randomness is split.
#[derive(Debug, Clone)]
pub struct RandomSource {
    rng: ChaCha20Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    /// Fresh seed for a child stream.
    pub fn fork_seed(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

impl RngCore for RandomSource {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// One draw from `Laplace(0, scale)` by inverting the CDF of a uniform draw.
pub fn laplace_sample(scale: f64, rng: &mut RandomSource) -> Result<f64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::param("scale", format!("must be positive, got {scale}")));
    }
    Ok(scale * standard_laplace(rng))
}

fn standard_laplace(rng: &mut RandomSource) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        // u = -0.5 would map to -inf
        if u > -0.5 {
            return -u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
    }
}

/// `b̃`: `len` i.i.d. standard Laplace draws (location 0, scale 1).
pub fn standard_laplace_vector(len: usize, rng: &mut RandomSource) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| standard_laplace(rng)))
}

/// Maximum absolute column sum.
pub fn sensitivity_l1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `|{t ∈ D : t ≤ bound}|`; sensitivity 1.
pub fn counting_query(data: &Dataset, bound: f64) -> usize {
    data.count_at_most(bound)
}

/// Above-threshold sparse vector technique for sensitivity-1 queries.
///
/// The threshold is perturbed with `Laplace(2/ε)` and each query with
/// `Laplace(4/ε)`; the first query whose noisy value strictly exceeds the
/// noisy threshold is reported. The whole call is ε-DP no matter how many
/// queries are inspected. Returns `None` when the list is exhausted.
pub fn svt<I, Q>(
    data: &Dataset,
    queries: I,
    threshold: f64,
    epsilon: f64,
    rng: &mut RandomSource,
) -> Result<Option<usize>>
where
    I: IntoIterator<Item = Q>,
    Q: FnOnce(&Dataset) -> f64,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::param("epsilon", "SVT budget must be positive"));
    }
    let noisy_threshold = threshold + laplace_sample(2.0 / epsilon, rng)?;
    for (k, query) in queries.into_iter().enumerate() {
        let noisy = query(data) + laplace_sample(4.0 / epsilon, rng)?;
        if noisy > noisy_threshold {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

/// A privacy-budget amount held as an exact rational.
///
/// Every `f64` is a dyadic rational, so budgets built from `f64` inputs
/// split and sum without rounding. `ρε + (1-ρ)ε` in floating point does not
/// always equal `ε` (try `ε = 0.01, ρ = 0.1`); here it always does.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Epsilon(BigRational);

impl Epsilon {
    pub fn from_f64(value: f64) -> Result<Self> {
        BigRational::from_float(value)
            .filter(|r| *r >= BigRational::zero())
            .map(Self)
            .ok_or_else(|| Error::param("epsilon", format!("not a finite non-negative value: {value}")))
    }

    pub fn zero() -> Self {
        Self(BigRational::zero())
    }

    /// Nearest `f64`.
    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        Ok(Self(&self.0 * Self::from_f64(factor)?.0))
    }

    pub fn divide(&self, parts: usize) -> Self {
        Self(&self.0 / BigRational::from_integer(BigInt::from(parts)))
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl fmt::Debug for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Epsilon({})", self.to_f64())
    }
}

impl Add for Epsilon {
    type Output = Epsilon;
    fn add(self, rhs: Epsilon) -> Epsilon {
        Epsilon(self.0 + rhs.0)
    }
}

impl Sub for Epsilon {
    type Output = Epsilon;
    fn sub(self, rhs: Epsilon) -> Epsilon {
        Epsilon(self.0 - rhs.0)
    }
}

impl Sum for Epsilon {
    fn sum<I: Iterator<Item = Epsilon>>(iter: I) -> Epsilon {
        iter.fold(Epsilon::zero(), Add::add)
    }
}

/// Total budget `ε` split as `ε₁ = ρε` for threshold selection and
/// `ε₂ = ε − ε₁` for measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyBudget {
    epsilon: f64,
    rho: f64,
    total: Epsilon,
    selection: Epsilon,
    measurement: Epsilon,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, rho: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::param("epsilon", format!("must be positive, got {epsilon}")));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::param("rho", format!("must lie in [0, 1), got {rho}")));
        }
        let total = Epsilon::from_f64(epsilon)?;
        Self::from_exact(total, rho)
    }

    /// Budget whose total is already an exact amount (e.g. `ε / p`).
    pub fn from_exact(total: Epsilon, rho: f64) -> Result<Self> {
        if total.is_zero() {
            return Err(Error::param("epsilon", "must be positive"));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::param("rho", format!("must lie in [0, 1), got {rho}")));
        }
        let selection = total.scale(rho)?;
        let measurement = total.clone() - selection.clone();
        Ok(Self {
            epsilon: total.to_f64(),
            rho,
            total,
            selection,
            measurement,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `ε₁`, rounded to the nearest `f64`.
    pub fn epsilon1(&self) -> f64 {
        self.selection.to_f64()
    }

    /// `ε₂`, rounded to the nearest `f64`.
    pub fn epsilon2(&self) -> f64 {
        self.measurement.to_f64()
    }

    pub fn total_exact(&self) -> &Epsilon {
        &self.total
    }

    pub fn epsilon1_exact(&self) -> &Epsilon {
        &self.selection
    }

    pub fn epsilon2_exact(&self) -> &Epsilon {
        &self.measurement
    }
}

/// Record of which component consumed how much budget.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetLedger {
    configured: Epsilon,
    entries: Vec<(String, Epsilon)>,
}

impl BudgetLedger {
    pub fn new(configured: Epsilon) -> Self {
        Self {
            configured,
            entries: Vec::new(),
        }
    }

    pub fn charge(&mut self, component: impl Into<String>, amount: Epsilon) {
        self.entries.push((component.into(), amount));
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(c, e)| (c.as_str(), e.to_f64()))
    }

    pub fn configured(&self) -> &Epsilon {
        &self.configured
    }

    pub fn consumed(&self) -> Epsilon {
        self.entries.iter().map(|(_, e)| e.clone()).sum()
    }

    /// Whether the charges add up to the configured budget exactly.
    pub fn is_balanced(&self) -> bool {
        self.consumed() == self.configured
    }
}
