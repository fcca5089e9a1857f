//! Order-independent summary statistics.

/// Pairwise (cascade) summation. The result depends only on the order of
/// `values`, which callers keep fixed by path index.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// Unbiased sample covariance.
pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let (ma, mb) = (mean(a), mean(b));
    let prods: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    pairwise_sum(&prods) / (n - 1) as f64
}

pub fn variance(a: &[f64]) -> f64 {
    covariance(a, a)
}

/// Standard error of the sample mean.
pub fn std_error(a: &[f64]) -> f64 {
    (variance(a) / a.len() as f64).sqrt()
}
