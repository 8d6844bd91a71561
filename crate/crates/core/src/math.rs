//! Small dense-vector helpers used by the model and scoring paths.
//!
//! Everything is plain `f64` with fixed left-to-right reduction order so that
//! results are bit-stable across runs and platforms.

/// Dot product with left-to-right accumulation.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Dense matrix (rows × cols, row-major) times vector.
pub fn matvec(matrix: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(matrix.len(), rows * cols);
    debug_assert_eq!(v.len(), cols);
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        out.push(dot(&matrix[r * cols..(r + 1) * cols], v));
    }
    out
}

/// Numerically stable softmax over a slice; returns a fresh vector.
///
/// An empty slice yields an empty vector.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    out
}

/// Cosine similarity. A zero-norm side is treated as "unchanged" and maps to
/// 1.0; callers that care log the event.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    dot(a, b) / (na * nb)
}

/// Max-absolute-difference between two equal-length vectors.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
