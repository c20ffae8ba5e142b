//! Fraction-of-grid selection shared by the scoring stages.

/// `ceil(fraction * n)`, snapping products that land within rounding noise
/// of an integer so that e.g. `0.1 * 30` selects 3 cells, not 4.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    if n == 0 || fraction <= 0.0 {
        return 0;
    }
    let x = fraction * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (k as usize).clamp(1, n)
}

/// Indices of the `k` largest values, best first; equal values resolve to
/// the smaller index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Membership mask of [`top_k_indices`].
pub fn top_k_mask(values: &[f64], k: usize) -> Vec<bool> {
    let mut mask = vec![false; values.len()];
    for i in top_k_indices(values, k) {
        mask[i] = true;
    }
    mask
}
