//! Strategy matrices for the matrix mechanism.
//!
//! A strategy `A` (m×n, full column rank) is measured with Laplace noise and
//! workload answers are reconstructed through the left pseudoinverse
//! `A⁺ = (AᵀA)⁻¹Aᵀ`. [`greedy_h`] builds a workload-adapted hierarchical
//! strategy; [`expected_error_timm`] and [`expected_error_tamm`] give the
//! closed-form total squared error of the two truncated matrix mechanisms.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::data::{CountVector, TruncatedWeightMatrix, WeightMatrix, WorkloadMatrix};
use crate::noise::sensitivity_l1;
use crate::{Error, Result};

/// Trace terms are computed by triangular solves above this size.
const SOLVE_TRACE_MIN_COLUMNS: usize = 257;

pub struct StrategyMatrix {
    a: DMatrix<f64>,
    gram: Cholesky<f64, Dyn>,
    gram_inverse: OnceLock<DMatrix<f64>>,
}

impl std::fmt::Debug for StrategyMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StrategyMatrix")
            .field("rows", &self.a.nrows())
            .field("cols", &self.a.ncols())
            .finish()
    }
}

impl Clone for StrategyMatrix {
    fn clone(&self) -> Self {
        Self::new(self.a.clone()).expect("already validated")
    }
}

impl StrategyMatrix {
    /// Fails with [`Error::Singular`] unless `a` has full column rank.
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(Error::param("strategy", "must be non-empty"));
        }
        if a.nrows() < a.ncols() {
            return Err(Error::Singular);
        }
        let gram = cholesky_checked(sparse_gram(&a))?;
        Ok(Self {
            a,
            gram,
            gram_inverse: OnceLock::new(),
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n)).expect("identity has full rank")
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn cols(&self) -> usize {
        self.a.ncols()
    }

    /// `‖A‖₁`, the maximum absolute column sum.
    pub fn sensitivity(&self) -> f64 {
        sensitivity_l1(&self.a)
    }

    /// `(AᵀA)⁻¹`, computed on first use.
    pub fn gram_inverse(&self) -> &DMatrix<f64> {
        self.gram_inverse.get_or_init(|| self.gram.inverse())
    }

    /// `A⁺ = (AᵀA)⁻¹Aᵀ`.
    pub fn pseudo_inverse(&self) -> DMatrix<f64> {
        self.gram.solve(&self.a.transpose())
    }

    /// `Tr(B (AᵀA)⁻¹ Bᵀ)` for any `B` with `n` columns.
    pub fn trace_quadratic(&self, b: &DMatrix<f64>) -> Result<f64> {
        if b.ncols() != self.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.cols(),
                found: b.ncols(),
            });
        }
        Ok(trace_quadratic(&self.gram, Some(&self.gram_inverse), b))
    }
}

/// `AᵀA` from the nonzeros of each row. Hierarchical strategies are sparse,
/// so this is far cheaper than a dense product.
fn sparse_gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    let mut gram = DMatrix::zeros(n, n);
    let mut nz: Vec<(usize, f64)> = Vec::with_capacity(n);
    for i in 0..a.nrows() {
        nz.clear();
        nz.extend((0..n).map(|j| (j, a[(i, j)])).filter(|&(_, v)| v != 0.0));
        for &(j, vj) in &nz {
            let mut col = gram.column_mut(j);
            for &(k, vk) in &nz {
                col[k] += vj * vk;
            }
        }
    }
    gram
}

fn cholesky_checked(gram: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let scale = gram.diagonal().iter().copied().fold(0.0, f64::max);
    let chol = Cholesky::new(gram).ok_or(Error::Singular)?;
    let l = chol.l_dirty();
    let min_pivot = (0..l.nrows()).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_pivot * min_pivot > 1e-12 * scale) {
        return Err(Error::Singular);
    }
    Ok(chol)
}

fn trace_quadratic(gram: &Cholesky<f64, Dyn>, inverse: Option<&OnceLock<DMatrix<f64>>>, b: &DMatrix<f64>) -> f64 {
    let n = b.ncols();
    if n < SOLVE_TRACE_MIN_COLUMNS {
        let owned;
        let inv = match inverse {
            Some(cell) => cell.get_or_init(|| gram.inverse()),
            None => {
                owned = gram.inverse();
                &owned
            }
        };
        let bg = b * inv;
        bg.component_mul(b).sum()
    } else {
        let y = gram.solve(&b.transpose());
        y.component_mul(&b.transpose()).sum()
    }
}

/// `argmin_y ‖A·y − z‖₂ = A⁺z`.
pub fn least_squares(a: &StrategyMatrix, z: &DVector<f64>) -> Result<DVector<f64>> {
    if z.len() != a.rows() {
        return Err(Error::DimensionMismatch {
            expected: a.rows(),
            found: z.len(),
        });
    }
    // Normal equations plus one refinement step on the residual.
    let mut y = a.gram.solve(&a.a.tr_mul(z));
    let residual = z - &a.a * &y;
    y += a.gram.solve(&a.a.tr_mul(&residual));
    Ok(y)
}

fn check_dims(
    w: &WorkloadMatrix,
    d: &WeightMatrix,
    t: &TruncatedWeightMatrix,
    x: &CountVector,
    a: &StrategyMatrix,
    epsilon: f64,
) -> Result<()> {
    let n = w.buckets();
    for found in [d.dim(), t.dim(), x.len(), a.cols()] {
        if found != n {
            return Err(Error::DimensionMismatch { expected: n, found });
        }
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::param("epsilon", "must be positive"));
    }
    Ok(())
}

/// `‖W(D − T)x‖₂²`.
fn truncation_bias(w: &WorkloadMatrix, d: &WeightMatrix, t: &TruncatedWeightMatrix, x: &CountVector) -> f64 {
    let gap = (d.diagonal() - t.diagonal()).component_mul(&x.to_vector());
    (w.matrix() * gap).norm_squared()
}

/// Expected total squared error of the truncation-independent matrix
/// mechanism against the untruncated answers `W·D·x`:
/// `‖W(D−T)x‖² + 2·‖AT‖₁²/ε² · Tr(W(AᵀA)⁻¹Wᵀ)`.
pub fn expected_error_timm(
    w: &WorkloadMatrix,
    d: &WeightMatrix,
    t: &TruncatedWeightMatrix,
    x: &CountVector,
    a: &StrategyMatrix,
    epsilon: f64,
) -> Result<f64> {
    check_dims(w, d, t, x, a, epsilon)?;
    let at = a.matrix() * t.to_matrix();
    let delta = sensitivity_l1(&at);
    let variance = 2.0 * delta * delta / (epsilon * epsilon) * a.trace_quadratic(w.matrix())?;
    Ok(truncation_bias(w, d, t, x) + variance)
}

/// Expected total squared error of the truncation-aware matrix mechanism:
/// `‖W(D−T)x‖² + 2·‖A‖₁²/ε² · Tr(WT(AᵀA)⁻¹TᵀWᵀ)`.
pub fn expected_error_tamm(
    w: &WorkloadMatrix,
    d: &WeightMatrix,
    t: &TruncatedWeightMatrix,
    x: &CountVector,
    a: &StrategyMatrix,
    epsilon: f64,
) -> Result<f64> {
    check_dims(w, d, t, x, a, epsilon)?;
    let delta = a.sensitivity();
    let wt = w.weighted(t.diagonal());
    let variance = 2.0 * delta * delta / (epsilon * epsilon) * a.trace_quadratic(&wt)?;
    Ok(truncation_bias(w, d, t, x) + variance)
}

/// Output of [`greedy_h`].
#[derive(Debug, Clone)]
pub struct StrategyChoice {
    pub strategy: StrategyMatrix,
    /// The hierarchical construction failed and identity was returned.
    pub fallback: bool,
}

/// One level of a hierarchy: contiguous column ranges sharing a weight.
#[derive(Debug, Clone)]
struct Level {
    groups: Vec<(usize, usize)>,
    weight: f64,
}

impl Level {
    fn leaves(n: usize) -> Self {
        Self {
            groups: (0..n).map(|i| (i, i + 1)).collect(),
            weight: 1.0,
        }
    }

    fn coarsen(&self, branching: usize) -> Self {
        let groups = self
            .groups
            .chunks(branching)
            .map(|c| (c[0].0, c[c.len() - 1].1))
            .collect();
        Self { groups, weight: 1.0 }
    }
}

struct HierarchyEvaluator {
    n: usize,
    // Wᵀ: one right-hand side per workload row
    rhs: DMatrix<f64>,
}

impl HierarchyEvaluator {
    fn new(workload: &DMatrix<f64>) -> Self {
        Self {
            n: workload.ncols(),
            rhs: workload.transpose(),
        }
    }

    /// `‖A‖₁² · Tr(W(AᵀA)⁻¹Wᵀ)`, proportional to the expected error of any
    /// matrix mechanism using this hierarchy.
    ///
    /// Levels are nested partitions, so `AᵀA` is the leaf term plus one
    /// weighted all-ones block per group. Processing groups bottom-up with
    /// Sherman-Morrison applies `(AᵀA)⁻¹` in `O(n · levels)` per workload row
    /// without forming any `n × n` matrix.
    fn error(&self, levels: &[Level]) -> f64 {
        let leaf = levels[0].weight * levels[0].weight;
        // u = C⁻¹1 for the block-diagonal C below the current level
        let mut u = vec![1.0 / leaf; self.n];
        let mut steps: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(levels.len() - 1);
        for level in &levels[1..] {
            let w2 = level.weight * level.weight;
            let before = u.clone();
            let coefs = level
                .groups
                .iter()
                .map(|&(s, e)| {
                    let tau: f64 = u[s..e].iter().sum();
                    let f = 1.0 / (1.0 + w2 * tau);
                    u[s..e].iter_mut().for_each(|v| *v *= f);
                    w2 * f
                })
                .collect();
            steps.push((before, coefs));
        }

        let mut y = vec![0.0; self.n];
        let mut trace = 0.0;
        for r in self.rhs.column_iter() {
            y.iter_mut().zip(r.iter()).for_each(|(y, r)| *y = r / leaf);
            for (level, (u, coefs)) in levels[1..].iter().zip(&steps) {
                for (&(s, e), &c) in level.groups.iter().zip(coefs) {
                    let sy: f64 = y[s..e].iter().sum();
                    for i in s..e {
                        y[i] -= u[i] * c * sy;
                    }
                }
            }
            trace += r.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
        }
        // every level partitions the columns, so all column sums agree
        let sensitivity: f64 = levels.iter().map(|l| l.weight).sum();
        sensitivity * sensitivity * trace
    }

    fn matrix(&self, levels: &[Level]) -> DMatrix<f64> {
        let rows: usize = levels.iter().map(|l| l.groups.len()).sum();
        let sensitivity: f64 = levels.iter().map(|l| l.weight).sum();
        let mut a = DMatrix::zeros(rows, self.n);
        let mut r = 0;
        // coarsest level first, leaves last
        for level in levels.iter().rev() {
            for &(s, e) in &level.groups {
                a.view_mut((r, s), (1, e - s)).fill(level.weight / sensitivity);
                r += 1;
            }
        }
        a
    }
}

/// Golden-section search of `f` over `log2(weight) ∈ [lo, hi]`.
fn golden_log_weight(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c.exp2()), f(d.exp2()));
    for _ in 0..14 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c.exp2());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d.exp2());
        }
    }
    if fc <= fd {
        (c.exp2(), fc)
    } else {
        (d.exp2(), fd)
    }
}

/// Builds a hierarchical strategy adapted to `workload` (any real matrix
/// whose columns are buckets: `W` or the weighted `W·T`).
///
/// Starting from the identity (leaf) level, coarser levels are added
/// bottom-up. For each new level the branching factor is chosen from
/// `2..=16` and its weight is tuned, both to minimise
/// `‖A‖₁²·Tr(W(AᵀA)⁻¹Wᵀ)`. A level is kept only if it lowers that error, so
/// the result never does worse than the identity strategy. Finally all
/// level weights get one more tuning pass and `A` is scaled so `‖A‖₁ = 1`.
pub fn greedy_h(workload: &DMatrix<f64>) -> Result<StrategyChoice> {
    let n = workload.ncols();
    if n == 0 || workload.nrows() == 0 {
        return Err(Error::param("workload", "must be non-empty"));
    }
    if workload.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("workload", "entries must be finite"));
    }
    let eval = HierarchyEvaluator::new(workload);
    let mut levels = vec![Level::leaves(n)];
    let identity_error = eval.error(&levels);
    let mut best = identity_error;

    loop {
        let top = &levels[levels.len() - 1];
        let k = top.groups.len();
        if k == 1 {
            break;
        }
        let candidates: Vec<(usize, f64)> = (2..=16.min(k))
            .into_par_iter()
            .map(|b| {
                let mut trial = levels.clone();
                trial.push(top.coarsen(b));
                (b, eval.error(&trial))
            })
            .collect();
        let (branching, _) = candidates
            .into_iter()
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("at least one branching factor");

        let mut trial = levels.clone();
        trial.push(top.coarsen(branching));
        let last = trial.len() - 1;
        let (weight, err) = golden_log_weight(-6.0, 6.0, |w| {
            let mut t = trial.clone();
            t[last].weight = w;
            eval.error(&t)
        });
        if !(err < best * (1.0 - 1e-9)) {
            break;
        }
        trial[last].weight = weight;
        levels = trial;
        best = err;
    }

    for idx in 1..levels.len() {
        let current = levels[idx].weight.log2();
        let (weight, err) = golden_log_weight(current - 3.0, current + 3.0, |w| {
            let mut t = levels.clone();
            t[idx].weight = w;
            eval.error(&t)
        });
        if err < best {
            levels[idx].weight = weight;
            best = err;
        }
    }

    if !(best <= identity_error) {
        return Ok(StrategyChoice {
            strategy: StrategyMatrix::identity(n),
            fallback: false,
        });
    }
    match StrategyMatrix::new(eval.matrix(&levels)) {
        Ok(strategy) => Ok(StrategyChoice {
            strategy,
            fallback: false,
        }),
        Err(Error::Singular) => Ok(StrategyChoice {
            strategy: StrategyMatrix::identity(n),
            fallback: true,
        }),
        Err(e) => Err(e),
    }
}

/// Source of strategies for the matrix mechanisms.
pub trait StrategySource: Sync {
    fn strategy_for(&self, workload: &DMatrix<f64>) -> Result<Arc<StrategyChoice>>;
}

/// Runs [`greedy_h`] on every request.
#[derive(Debug, Default, Clone, Copy)]
pub struct FreshStrategies;

impl StrategySource for FreshStrategies {
    fn strategy_for(&self, workload: &DMatrix<f64>) -> Result<Arc<StrategyChoice>> {
        greedy_h(workload).map(Arc::new)
    }
}

type CacheSlot = Arc<OnceLock<Result<Arc<StrategyChoice>>>>;
/// Workloads with the same hash, each with its own slot.
type Bucket = Vec<(DMatrix<f64>, CacheSlot)>;

/// Memoises [`greedy_h`] by workload matrix; safe to share across threads.
///
/// Concurrent requests for the same matrix compute it once.
#[derive(Default)]
pub struct StrategyCache {
    slots: Mutex<HashMap<u64, Bucket>>,
}

impl StrategyCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.slots.lock().unwrap().values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slot(&self, workload: &DMatrix<f64>) -> CacheSlot {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        workload.shape().hash(&mut h);
        for v in workload.iter() {
            v.to_bits().hash(&mut h);
        }
        let key = h.finish();
        let mut slots = self.slots.lock().unwrap();
        let bucket = slots.entry(key).or_default();
        if let Some((_, slot)) = bucket.iter().find(|(m, _)| m == workload) {
            return slot.clone();
        }
        let slot = CacheSlot::default();
        bucket.push((workload.clone(), slot.clone()));
        slot
    }
}

impl StrategySource for StrategyCache {
    fn strategy_for(&self, workload: &DMatrix<f64>) -> Result<Arc<StrategyChoice>> {
        self.slot(workload)
            .get_or_init(|| greedy_h(workload).map(Arc::new))
            .clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &DVector<f64>, b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{a} vs {b:?}");
        }
    }

    /// Expected error with `T = D = I`, `ε = 1`.
    fn plain_error(w: &DMatrix<f64>, a: &StrategyMatrix) -> f64 {
        let n = w.ncols();
        let wl = WorkloadMatrix::from_matrix(w.clone()).unwrap();
        let ones = WeightMatrix::from_diagonal(vec![1.0; n]).unwrap();
        let x = CountVector::new(vec![0; n]);
        expected_error_timm(&wl, &ones, &ones.untruncated(), &x, a, 1.0).unwrap()
    }

    #[test]
    fn least_squares_examples() {
        let z = DVector::from_vec(vec![3.0, -1.0, 4.0]);
        assert_close(
            &least_squares(&StrategyMatrix::identity(3), &z).unwrap(),
            &[3.0, -1.0, 4.0],
            1e-12,
        );

        let a = StrategyMatrix::new(DMatrix::from_row_slice(2, 1, &[1.0, 1.0])).unwrap();
        let z = DVector::from_vec(vec![1.0, 3.0]);
        assert_close(&least_squares(&a, &z).unwrap(), &[2.0], 1e-12);

        let a = StrategyMatrix::new(DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0])).unwrap();
        let z = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_close(&least_squares(&a, &z).unwrap(), &[1.0, 2.0], 1e-12);

        assert_eq!(
            least_squares(&a, &DVector::zeros(2)),
            Err(Error::DimensionMismatch { expected: 3, found: 2 })
        );
    }

    #[test]
    fn least_squares_residual_is_orthogonal() {
        for n in [10, 80, 300] {
            let w = WorkloadMatrix::lower_triangular(n);
            let a = greedy_h(w.matrix()).unwrap().strategy;
            assert!((sparse_gram(a.matrix()) - a.matrix().tr_mul(a.matrix())).amax() < 1e-12);
            let z = DVector::from_fn(a.rows(), |i, _| ((i * 37 % 11) as f64) - 5.0);
            let y = least_squares(&a, &z).unwrap();
            let normal = a.matrix().tr_mul(&(a.matrix() * &y - &z));
            assert!(normal.amax() < 1e-9, "{}", normal.amax());
        }
    }

    #[test]
    fn rank_deficient_strategy_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(StrategyMatrix::new(a).unwrap_err(), Error::Singular);
        let wide = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert_eq!(StrategyMatrix::new(wide).unwrap_err(), Error::Singular);
    }

    #[test]
    fn expected_error_one_dimensional_examples() {
        let w = WorkloadMatrix::from_matrix(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let a = StrategyMatrix::identity(1);
        let theta = 7.0;
        let d = WeightMatrix::from_diagonal(vec![theta]).unwrap();
        let t = d.untruncated();
        let x = CountVector::new(vec![5]);
        let two_theta_sq = 2.0 * theta * theta;
        assert_eq!(expected_error_timm(&w, &d, &t, &x, &a, 1.0).unwrap(), two_theta_sq);
        assert_eq!(expected_error_tamm(&w, &d, &t, &x, &a, 1.0).unwrap(), two_theta_sq);

        let d = WeightMatrix::from_diagonal(vec![100.0]).unwrap();
        let t = d.truncate(50.0).unwrap();
        let x = CountVector::new(vec![3]);
        assert_eq!(expected_error_timm(&w, &d, &t, &x, &a, 1.0).unwrap(), 27_500.0);
        assert_eq!(expected_error_tamm(&w, &d, &t, &x, &a, 1.0).unwrap(), 27_500.0);
    }

    #[test]
    fn expected_error_limits() {
        let n = 6;
        let w = WorkloadMatrix::lower_triangular(n);
        let d = WeightMatrix::from_diagonal((1..=n).map(|i| 10.0 * i as f64).collect()).unwrap();
        let x = CountVector::new(vec![4, 0, 2, 7, 1, 3]);
        let a = greedy_h(w.matrix()).unwrap().strategy;

        // T = D: variance only
        let t = d.untruncated();
        let timm = expected_error_timm(&w, &d, &t, &x, &a, 1.0).unwrap();
        let variance =
            2.0 * sensitivity_l1(&(a.matrix() * t.to_matrix())).powi(2) * a.trace_quadratic(w.matrix()).unwrap();
        assert!((timm - variance).abs() < 1e-9 * variance);

        // T = 0: pure bias for the truncation-aware evaluator
        let t = d.truncate(0.0).unwrap();
        let exact = w.weighted(d.diagonal()) * x.to_vector();
        let tamm = expected_error_tamm(&w, &d, &t, &x, &a, 1.0).unwrap();
        assert!((tamm - exact.norm_squared()).abs() < 1e-9 * tamm);
    }

    #[test]
    fn variance_scales_with_inverse_epsilon_squared() {
        let n = 8;
        let w = WorkloadMatrix::lower_triangular(n);
        let d = WeightMatrix::from_diagonal((1..=n).map(|i| i as f64).collect()).unwrap();
        let t = d.untruncated();
        let x = CountVector::new(vec![1; n]);
        let a = greedy_h(w.matrix()).unwrap().strategy;
        for f in [expected_error_timm, expected_error_tamm] {
            let e1 = f(&w, &d, &t, &x, &a, 1.0).unwrap();
            let e3 = f(&w, &d, &t, &x, &a, 3.0).unwrap();
            assert!((e1 / 9.0 - e3).abs() < 1e-12 * e1);
        }
    }

    #[test]
    fn expected_error_rejects_bad_inputs() {
        let w = WorkloadMatrix::lower_triangular(3);
        let d = WeightMatrix::from_diagonal(vec![1.0; 3]).unwrap();
        let x = CountVector::new(vec![1; 3]);
        let a = StrategyMatrix::identity(3);
        let bad_x = CountVector::new(vec![1; 2]);
        assert!(expected_error_timm(&w, &d, &d.untruncated(), &bad_x, &a, 1.0).is_err());
        assert!(expected_error_tamm(&w, &d, &d.untruncated(), &x, &a, 0.0).is_err());
    }

    #[test]
    fn greedy_trivial_and_identity_workloads() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let choice = greedy_h(&one).unwrap();
        assert_eq!(choice.strategy.matrix(), &one);
        assert!(!choice.fallback);

        for n in [1, 4, 9] {
            let id = DMatrix::identity(n, n);
            let a = greedy_h(&id).unwrap().strategy;
            assert!(plain_error(&id, &a) <= plain_error(&id, &StrategyMatrix::identity(n)) + 1e-9);
        }
        assert!(greedy_h(&DMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn greedy_on_prefix_workload() {
        // at n = 8 no hierarchy with one weight per level beats identity
        let w = WorkloadMatrix::lower_triangular(8);
        let ident = plain_error(w.matrix(), &StrategyMatrix::identity(8));
        assert_eq!(ident, 72.0);
        let got = plain_error(w.matrix(), &greedy_h(w.matrix()).unwrap().strategy);
        assert!(got <= ident + 1e-9);

        let w = WorkloadMatrix::lower_triangular(16);
        let ident = plain_error(w.matrix(), &StrategyMatrix::identity(16));
        let got = plain_error(w.matrix(), &greedy_h(w.matrix()).unwrap().strategy);
        assert!(got < 0.95 * ident, "greedy {got} vs identity {ident}");

        // at n = 64 a single tuned level already halves the error
        let w = WorkloadMatrix::lower_triangular(64);
        let ident = plain_error(w.matrix(), &StrategyMatrix::identity(64));
        assert_eq!(ident, 4160.0);
        let got = plain_error(w.matrix(), &greedy_h(w.matrix()).unwrap().strategy);
        assert!(got < 0.53 * ident, "greedy {got} vs identity {ident}");
    }

    #[test]
    fn greedy_strategy_properties() {
        for n in [3, 16, 50, 100] {
            let w = WorkloadMatrix::lower_triangular(n);
            let diag = (1..=n).map(|i| (i as f64 * 13.0).min(300.0)).collect::<Vec<_>>();
            for target in [w.matrix().clone(), w.weighted(&DVector::from_vec(diag))] {
                let choice = greedy_h(&target).unwrap();
                let a = &choice.strategy;
                assert!((a.sensitivity() - 1.0).abs() < 1e-12);
                let pinv_a = a.pseudo_inverse() * a.matrix();
                assert!((pinv_a - DMatrix::<f64>::identity(n, n)).amax() < 1e-9);
                let ident = StrategyMatrix::identity(n);
                let ours = a.trace_quadratic(&target).unwrap();
                assert!(ours <= ident.trace_quadratic(&target).unwrap() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn large_trace_path_agrees_with_inverse_path() {
        let n = 300;
        let a = StrategyMatrix::new(DMatrix::from_fn(n + 5, n, |r, c| {
            if r == c || (r >= n && c % 5 == r - n) {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let w = WorkloadMatrix::lower_triangular(n);
        let via_solve = a.trace_quadratic(w.matrix()).unwrap();
        let via_inverse = (w.matrix() * a.gram_inverse()).component_mul(w.matrix()).sum();
        assert!((via_solve - via_inverse).abs() < 1e-8 * via_inverse);
    }

    #[test]
    fn tree_evaluator_matches_dense_formula() {
        let w = DMatrix::from_fn(7, 11, |r, c| if (r * 3 + c) % 4 == 0 || c <= r { 1.0 } else { 0.0 });
        let eval = HierarchyEvaluator::new(&w);
        let mut levels = vec![Level::leaves(11)];
        levels.push(levels[0].coarsen(3));
        levels.push(levels[1].coarsen(2));
        levels[0].weight = 0.7;
        levels[1].weight = 1.9;
        levels[2].weight = 0.4;
        let a = StrategyMatrix::new(eval.matrix(&levels)).unwrap();
        let dense = a.sensitivity().powi(2) * a.trace_quadratic(&w).unwrap();
        // `matrix` normalises A, which leaves Δ²·Tr unchanged
        let tree = eval.error(&levels);
        assert!((tree - dense).abs() < 1e-9 * dense, "{tree} vs {dense}");
    }

    #[test]
    fn cache_returns_same_strategy() {
        let cache = StrategyCache::new();
        let w = WorkloadMatrix::lower_triangular(12);
        let a = cache.strategy_for(w.matrix()).unwrap();
        let b = cache.strategy_for(w.matrix()).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        let other = WorkloadMatrix::lower_triangular(13);
        cache.strategy_for(other.matrix()).unwrap();
        assert_eq!(cache.len(), 2);
    }
}
