//! Datasets, bucketization, prefix workloads and truncation.
//!
//! Everything here is deterministic: these are the exact (non-private)
//! quantities every mechanism perturbs.
//!
//! Truncated queries decide membership by the *original* record value:
//! `trunc_query(D, i, θ) = Σ_{t ∈ D, t ≤ i} min(t, θ)`. This is what the
//! matrix form `W·T` computes, since a record's bucket is fixed before its
//! weight is clipped. The single-query algorithms instead clip the dataset
//! first and then query it ([`Dataset::truncated_prefix_sum`]); the two
//! differ whenever `θ < i` and records above `i` exist.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A multiset of non-negative record values, one per individual.
///
/// Records are kept sorted so that prefix and counting queries run in
/// `O(log N)`; order carries no meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sorted: Vec<f64>,
    // cumulative[k] = sum of the k smallest records
    cumulative: Vec<f64>,
}

impl Dataset {
    pub fn new(mut records: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = records.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::param(
                "records",
                format!("record values must be finite and non-negative, got {bad}"),
            ));
        }
        records.sort_by(f64::total_cmp);
        let mut cumulative = Vec::with_capacity(records.len() + 1);
        let mut acc = 0.0;
        cumulative.push(acc);
        for v in &records {
            acc += v;
            cumulative.push(acc);
        }
        Ok(Self {
            sorted: records,
            cumulative,
        })
    }

    pub fn empty() -> Self {
        Self {
            sorted: Vec::new(),
            cumulative: vec![0.0],
        }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Records in ascending order.
    pub fn records(&self) -> &[f64] {
        &self.sorted
    }

    pub fn max(&self) -> Option<f64> {
        self.sorted.last().copied()
    }

    pub fn total(&self) -> f64 {
        self.cumulative[self.sorted.len()]
    }

    /// Number of records with value `≤ bound`.
    pub fn count_at_most(&self, bound: f64) -> usize {
        self.sorted.partition_point(|&v| v <= bound)
    }

    /// `q_i(D)`: sum of all record values `≤ i`.
    pub fn prefix_sum(&self, i: f64) -> f64 {
        self.cumulative[self.count_at_most(i)]
    }

    /// `Σ_{t ∈ D} min(t, θ)`.
    pub fn clipped_sum(&self, theta: f64) -> f64 {
        let below = self.count_at_most(theta);
        self.cumulative[below] + theta * (self.len() - below) as f64
    }

    /// `Trunc_θ(q_i)(D) = Σ_{t ∈ D, t ≤ i} min(t, θ)`.
    ///
    /// Global sensitivity under add/remove-one neighbours is `min(i, θ)`.
    pub fn trunc_query(&self, i: f64, theta: f64) -> f64 {
        let members = self.count_at_most(i);
        let unclipped = self.count_at_most(theta).min(members);
        self.cumulative[unclipped] + theta * (members - unclipped) as f64
    }

    /// Replaces every record `v` by `min(v, θ)`.
    pub fn truncate(&self, theta: f64) -> Dataset {
        // min() of a sorted sequence with a constant stays sorted
        let sorted: Vec<f64> = self.sorted.iter().map(|&v| v.min(theta)).collect();
        let mut cumulative = Vec::with_capacity(sorted.len() + 1);
        let mut acc = 0.0;
        cumulative.push(acc);
        for v in &sorted {
            acc += v;
            cumulative.push(acc);
        }
        Dataset { sorted, cumulative }
    }

    /// `q_σ(Truncate(D, θ))` without materialising the truncated dataset.
    pub fn truncated_prefix_sum(&self, theta: f64, sigma: f64) -> f64 {
        if theta <= sigma {
            self.clipped_sum(theta)
        } else {
            self.prefix_sum(sigma)
        }
    }
}

/// Contiguous half-open buckets `(l_i, u_i]` covering `[0, u_k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BucketSpec {
    pub fn new(buckets: Vec<(f64, f64)>) -> Result<Self> {
        if buckets.is_empty() {
            return Err(Error::param("buckets", "at least one bucket is required"));
        }
        if buckets[0].0 >= 0.0 {
            return Err(Error::param(
                "buckets",
                "the first bucket must be open below zero so that 0 is covered",
            ));
        }
        for (k, &(l, u)) in buckets.iter().enumerate() {
            if !(l.is_finite() && u.is_finite()) || u <= l {
                return Err(Error::param(
                    "buckets",
                    format!("bucket {k} = ({l}, {u}] is empty or not finite"),
                ));
            }
            if k > 0 && l != buckets[k - 1].1 {
                return Err(Error::param(
                    "buckets",
                    format!("bucket {k} does not start where bucket {} ends", k - 1),
                ));
            }
        }
        let (lower, upper) = buckets.into_iter().unzip();
        Ok(Self { lower, upper })
    }

    /// Contiguous buckets with the given upper bounds; the first bucket is
    /// `(-1, u_1]`.
    pub fn from_upper_bounds(upper: &[f64]) -> Result<Self> {
        if upper.first().is_some_and(|&u| u < 0.0) {
            return Err(Error::param("buckets", "upper bounds must be non-negative"));
        }
        let mut lower = -1.0;
        let buckets = upper
            .iter()
            .map(|&u| {
                let b = (lower, u);
                lower = u;
                b
            })
            .collect();
        Self::new(buckets)
    }

    /// `count` buckets of equal `width`: `(-1, w], (w, 2w], …`.
    pub fn uniform(width: f64, count: usize) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::param("bucket_width", "must be positive and finite"));
        }
        let upper: Vec<f64> = (1..=count).map(|i| width * i as f64).collect();
        Self::from_upper_bounds(&upper)
    }

    pub fn len(&self) -> usize {
        self.upper.len()
    }

    pub fn is_empty(&self) -> bool {
        self.upper.is_empty()
    }

    pub fn upper_bounds(&self) -> &[f64] {
        &self.upper
    }

    pub fn lower_bounds(&self) -> &[f64] {
        &self.lower
    }

    pub fn domain_top(&self) -> f64 {
        *self.upper.last().expect("bucket spec is never empty")
    }

    /// Index of the bucket containing `value`, if any.
    pub fn bucket_of(&self, value: f64) -> Option<usize> {
        if value <= self.lower[0] {
            return None;
        }
        let idx = self.upper.partition_point(|&u| u < value);
        (idx < self.upper.len()).then_some(idx)
    }
}

/// Histogram of records per bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountVector(Vec<u64>);

impl CountVector {
    pub fn new(counts: Vec<u64>) -> Self {
        Self(counts)
    }

    pub fn counts(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.0.len(), self.0.iter().map(|&c| c as f64))
    }
}

/// Diagonal weight matrix `D` with `D_ii = u_i`, stored as its diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    diag: DVector<f64>,
}

impl WeightMatrix {
    pub fn from_buckets(buckets: &BucketSpec) -> Self {
        Self {
            diag: DVector::from_column_slice(buckets.upper_bounds()),
        }
    }

    /// Arbitrary non-negative diagonal; used for synthetic instances.
    pub fn from_diagonal(diag: Vec<f64>) -> Result<Self> {
        if diag.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::param("weights", "must be finite and non-negative"));
        }
        Ok(Self {
            diag: DVector::from_vec(diag),
        })
    }

    pub fn diagonal(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.diag)
    }

    /// `T_ii = min(D_ii, θ)`.
    pub fn truncate(&self, theta: f64) -> Result<TruncatedWeightMatrix> {
        if theta.is_nan() || theta < 0.0 {
            return Err(Error::param("theta", "truncation threshold must be ≥ 0"));
        }
        Ok(TruncatedWeightMatrix {
            diag: self.diag.map(|u| u.min(theta)),
            theta: Some(theta),
        })
    }

    /// `T = D`, i.e. no truncation.
    pub fn untruncated(&self) -> TruncatedWeightMatrix {
        TruncatedWeightMatrix {
            diag: self.diag.clone(),
            theta: None,
        }
    }
}

/// Truncated diagonal weights `T`; `theta` is `None` when `T = D`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedWeightMatrix {
    diag: DVector<f64>,
    theta: Option<f64>,
}

impl TruncatedWeightMatrix {
    pub fn diagonal(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn theta(&self) -> Option<f64> {
        self.theta
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn max_weight(&self) -> f64 {
        self.diag.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.diag)
    }
}

/// A 0-1 query matrix, one row per query.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadMatrix {
    matrix: DMatrix<f64>,
    thresholds: Vec<f64>,
}

impl WorkloadMatrix {
    /// Row `j` selects the buckets with `u_i ≤ σ_j`.
    pub fn prefix(thresholds: &[f64], buckets: &BucketSpec) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::param("thresholds", "workload needs at least one query"));
        }
        if thresholds.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::param("thresholds", "must be sorted ascending"));
        }
        let upper = buckets.upper_bounds();
        let n = upper.len();
        let mut matrix = DMatrix::zeros(thresholds.len(), n);
        for (j, &sigma) in thresholds.iter().enumerate() {
            if !upper.contains(&sigma) {
                return Err(Error::Alignment { threshold: sigma });
            }
            for (i, &u) in upper.iter().enumerate() {
                if u <= sigma {
                    matrix[(j, i)] = 1.0;
                }
            }
        }
        Ok(Self {
            matrix,
            thresholds: thresholds.to_vec(),
        })
    }

    /// Full lower-triangular prefix workload over `n` buckets.
    pub fn lower_triangular(n: usize) -> Self {
        let matrix = DMatrix::from_fn(n, n, |r, c| if c <= r { 1.0 } else { 0.0 });
        Self {
            matrix,
            thresholds: (1..=n).map(|i| i as f64).collect(),
        }
    }

    /// Any 0-1 matrix; thresholds default to the row index.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::param("workload", "must be non-empty"));
        }
        if matrix.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::param("workload", "entries must be 0 or 1"));
        }
        let thresholds = (1..=matrix.nrows()).map(|i| i as f64).collect();
        Ok(Self { matrix, thresholds })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn queries(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn buckets(&self) -> usize {
        self.matrix.ncols()
    }

    /// `W·T` for a diagonal `T` given by its diagonal.
    pub fn weighted(&self, diag: &DVector<f64>) -> DMatrix<f64> {
        let mut wt = self.matrix.clone();
        for (mut col, &d) in wt.column_iter_mut().zip(diag.iter()) {
            col *= d;
        }
        wt
    }
}

/// Buckets `x` and returns the count vector and weight matrix.
pub fn vectorize(data: &Dataset, buckets: &BucketSpec) -> Result<(CountVector, WeightMatrix)> {
    let mut counts = vec![0u64; buckets.len()];
    for &v in data.records() {
        let idx = buckets.bucket_of(v).ok_or(Error::OutOfDomain { value: v })?;
        counts[idx] += 1;
    }
    Ok((CountVector(counts), WeightMatrix::from_buckets(buckets)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(v: &[f64]) -> Dataset {
        Dataset::new(v.to_vec()).unwrap()
    }

    // direct summation oracles, independent of the cumulative-sum path
    fn naive_prefix(v: &[f64], i: f64) -> f64 {
        v.iter().filter(|&&t| t <= i).sum()
    }

    fn naive_trunc(v: &[f64], i: f64, theta: f64) -> f64 {
        v.iter().filter(|&&t| t <= i).map(|&t| t.min(theta)).sum()
    }

    #[test]
    fn prefix_sum_examples() {
        let d = ds(&[10.0, 20.0, 50.0]);
        assert_eq!(d.prefix_sum(30.0), naive_prefix(d.records(), 30.0));
        assert_eq!(d.prefix_sum(30.0), 30.0);
        assert_eq!(d.prefix_sum(5.0), 0.0);
        assert_eq!(d.prefix_sum(50.0), 80.0);
        assert_eq!(Dataset::empty().prefix_sum(100.0), 0.0);
    }

    #[test]
    fn trunc_query_examples() {
        let d = ds(&[10.0, 20.0, 50.0]);
        assert_eq!(naive_trunc(d.records(), 30.0, 15.0), 25.0);
        assert_eq!(d.trunc_query(30.0, 15.0), 25.0);
        assert_eq!(d.trunc_query(30.0, 1e9), 30.0);
        assert_eq!(d.trunc_query(30.0, 0.0), 0.0);
    }

    #[test]
    fn truncate_dataset_examples() {
        let d = ds(&[10.0, 200.0, 3000.0]);
        assert_eq!(d.truncate(100.0).records(), &[10.0, 100.0, 100.0]);
        assert_eq!(d.truncate(3000.0).records(), d.records());
        assert_eq!(d.truncate(0.0).records(), &[0.0, 0.0, 0.0]);
        assert_eq!(d.truncate(100.0).len(), 3);
    }

    #[test]
    fn rejects_negative_records() {
        assert!(matches!(
            Dataset::new(vec![1.0, -2.0]),
            Err(Error::InvalidParameter { .. })
        ));
        assert!(Dataset::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn vectorize_examples() {
        let b = BucketSpec::new(vec![(-1.0, 800.0), (800.0, 1600.0)]).unwrap();
        let (x, w) = vectorize(&ds(&[100.0, 900.0, 850.0]), &b).unwrap();
        assert_eq!(x.counts(), &[1, 2]);
        assert_eq!(w.diagonal().as_slice(), &[800.0, 1600.0]);

        let (x, w) = vectorize(&Dataset::empty(), &b).unwrap();
        assert_eq!(x.counts(), &[0, 0]);
        assert_eq!(w.diagonal().as_slice(), &[800.0, 1600.0]);

        assert_eq!(vectorize(&ds(&[2000.0]), &b), Err(Error::OutOfDomain { value: 2000.0 }));
    }

    #[test]
    fn bucket_boundaries_are_half_open() {
        let b = BucketSpec::uniform(800.0, 2).unwrap();
        assert_eq!(b.bucket_of(0.0), Some(0));
        assert_eq!(b.bucket_of(800.0), Some(0));
        assert_eq!(b.bucket_of(800.5), Some(1));
        assert_eq!(b.bucket_of(1600.0), Some(1));
        assert_eq!(b.bucket_of(1600.1), None);
    }

    #[test]
    fn bucket_spec_validation() {
        assert!(BucketSpec::new(vec![]).is_err());
        assert!(BucketSpec::new(vec![(0.0, 10.0)]).is_err());
        assert!(BucketSpec::new(vec![(-1.0, 10.0), (11.0, 20.0)]).is_err());
        assert!(BucketSpec::new(vec![(-1.0, 10.0), (10.0, 10.0)]).is_err());
    }

    #[test]
    fn prefix_workload_examples() {
        let b = BucketSpec::uniform(800.0, 2).unwrap();
        let w = WorkloadMatrix::prefix(&[800.0, 1600.0], &b).unwrap();
        assert_eq!(w.matrix(), &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]));
        let w = WorkloadMatrix::prefix(&[1600.0], &b).unwrap();
        assert_eq!(w.matrix(), &DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
        assert_eq!(
            WorkloadMatrix::prefix(&[400.0], &b),
            Err(Error::Alignment { threshold: 400.0 })
        );
    }

    #[test]
    fn square_prefix_workload_is_lower_triangular() {
        let b = BucketSpec::uniform(1.0, 5).unwrap();
        let w = WorkloadMatrix::prefix(b.upper_bounds(), &b).unwrap();
        assert_eq!(w.matrix(), WorkloadMatrix::lower_triangular(5).matrix());
    }

    #[test]
    fn truncate_weight_matrix_examples() {
        let w = WeightMatrix::from_diagonal(vec![800.0, 1600.0, 2400.0]).unwrap();
        assert_eq!(
            w.truncate(1000.0).unwrap().diagonal().as_slice(),
            &[800.0, 1000.0, 1000.0]
        );
        assert_eq!(w.truncate(2400.0).unwrap().diagonal(), w.diagonal());
        assert_eq!(w.truncate(5000.0).unwrap().diagonal(), w.diagonal());
        assert!(w.truncate(0.0).unwrap().diagonal().iter().all(|&v| v == 0.0));
        assert!(w.truncate(-1.0).is_err());
    }

    #[test]
    fn matrix_form_matches_trunc_query_on_bucket_aligned_records() {
        // records sitting on their bucket's upper bound make the vector form exact
        let b = BucketSpec::uniform(100.0, 6).unwrap();
        let d = ds(&[100.0, 100.0, 300.0, 400.0, 600.0, 600.0, 600.0]);
        let (x, wd) = vectorize(&d, &b).unwrap();
        let w = WorkloadMatrix::prefix(&[200.0, 400.0, 600.0], &b).unwrap();
        for theta in [0.0, 150.0, 300.0, 1e6] {
            let t = wd.truncate(theta).unwrap();
            let answers = w.weighted(t.diagonal()) * x.to_vector();
            for (j, &sigma) in w.thresholds().iter().enumerate() {
                assert_eq!(answers[j], d.trunc_query(sigma, theta));
            }
        }
        let exact = w.weighted(wd.diagonal()) * x.to_vector();
        for (j, &sigma) in w.thresholds().iter().enumerate() {
            assert_eq!(exact[j], d.prefix_sum(sigma));
        }
    }

    #[test]
    fn truncated_prefix_sum_matches_materialised_truncation() {
        let d = ds(&[10.0, 1e6]);
        assert_eq!(d.truncated_prefix_sum(50.0, 100.0), 60.0);
        for theta in [0.0, 5.0, 10.0, 50.0, 2e6] {
            for sigma in [0.0, 10.0, 49.0, 100.0, 1e7] {
                assert_eq!(
                    d.truncated_prefix_sum(theta, sigma),
                    d.truncate(theta).prefix_sum(sigma)
                );
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn records() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0u32..2000, 0..40).prop_map(|v| v.into_iter().map(f64::from).collect())
        }

        proptest! {
            #[test]
            fn trunc_never_exceeds_prefix(v in records(), i in 0u32..2500, theta in 0u32..2500) {
                let d = Dataset::new(v.clone()).unwrap();
                let (i, theta) = (f64::from(i), f64::from(theta));
                prop_assert!(d.trunc_query(i, theta) <= d.prefix_sum(i));
                prop_assert_eq!(d.trunc_query(i, theta), naive_trunc(&v, i, theta));
                prop_assert_eq!(d.prefix_sum(i), naive_prefix(&v, i));
            }

            #[test]
            fn trunc_above_max_is_prefix(v in records(), i in 0u32..2500) {
                let d = Dataset::new(v).unwrap();
                let top = d.max().unwrap_or(0.0);
                prop_assert_eq!(d.trunc_query(f64::from(i), top), d.prefix_sum(f64::from(i)));
            }

            #[test]
            fn membership_is_decided_before_clipping(v in records(), i in 0u32..2500, theta in 0u32..2500) {
                let (i, theta) = (f64::from(i), f64::from(theta));
                let members: Vec<f64> = v.iter().copied().filter(|&t| t <= i).collect();
                let clipped = Dataset::new(members).unwrap().truncate(theta);
                let d = Dataset::new(v).unwrap();
                prop_assert_eq!(d.trunc_query(i, theta), clipped.prefix_sum(f64::INFINITY));
            }

            #[test]
            fn vectorize_preserves_cardinality(v in records()) {
                let b = BucketSpec::uniform(100.0, 20).unwrap();
                let d = Dataset::new(v).unwrap();
                let (x, _) = vectorize(&d, &b).unwrap();
                prop_assert_eq!(x.total() as usize, d.len());
            }
        }
    }
}
