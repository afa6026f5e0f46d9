//! Least-squares projection onto non-decreasing sequences.

/// Unweighted isotonic regression by pool-adjacent-violators.
pub fn isotonic_l2(y: &[f64]) -> Vec<f64> {
    isotonic_l2_weighted(y, &vec![1.0; y.len()])
}

/// Minimises `Σ w_i (out_i − y_i)²` over non-decreasing `out`.
///
/// # Panics
/// If the slices differ in length or a weight is not positive.
pub fn isotonic_l2_weighted(y: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(y.len(), weights.len(), "one weight per value");
    assert!(weights.iter().all(|&w| w > 0.0), "weights must be positive");

    // (mean, total weight, length) per pooled block
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&v, &w) in y.iter().zip(weights) {
        let mut block = (v, w, 1);
        while let Some(&(mean, weight, len)) = blocks.last() {
            if mean <= block.0 {
                break;
            }
            blocks.pop();
            let total = weight + block.1;
            // running mean avoids cancellation in large sums
            block = (mean + (block.0 - mean) * (block.1 / total), total, len + block.2);
        }
        blocks.push(block);
    }

    let mut out = Vec::with_capacity(y.len());
    for (mean, _, len) in blocks {
        out.extend(std::iter::repeat_n(mean, len));
    }
    out
}
