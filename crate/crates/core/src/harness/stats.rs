//! Sequence agreement and rank-correlation metrics.

use crate::error::{Error, Result};

/// Fraction of positions where the two sequences hold the same token.
pub fn agreement_rate(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Comparison(format!(
            "sequence lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Comparison("cannot compare empty sequences".into()));
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = mean_rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; 1.0 when either side is constant (no rank
/// variation means no observable instability).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Comparison("spearman inputs differ in length".into()));
    }
    if a.is_empty() {
        return Err(Error::Comparison("spearman needs at least one sample".into()));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        var_a += (x - mean) * (x - mean);
        var_b += (y - mean) * (y - mean);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Ok(1.0);
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_agree_fully() {
        assert_eq!(agreement_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_sequences_agree_nowhere() {
        assert_eq!(agreement_rate(&[1, 2], &[3, 4]).unwrap(), 0.0);
    }

    #[test]
    fn one_difference_of_eight() {
        let a = [0, 1, 2, 3, 4, 5, 6, 7];
        let mut b = a;
        b[3] = 99;
        assert!((agreement_rate(&a, &b).unwrap() - 0.875).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_comparison_error() {
        assert!(matches!(agreement_rate(&[1], &[1, 2]), Err(Error::Comparison(_))));
    }

    #[test]
    fn spearman_of_monotone_maps_is_one() {
        let a = [0.1, 0.5, 0.3, 0.9];
        let b: Vec<f64> = a.iter().map(|x| x * x + 1.0).collect();
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_of_reversed_is_minus_one() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &b).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties_via_average_ranks() {
        // Hand-computed: ranks a = (1.5, 1.5, 3), b = (1, 2, 3).
        let a = [0.2, 0.2, 0.7];
        let b = [0.1, 0.4, 0.9];
        let got = spearman(&a, &b).unwrap();
        // cov = (-1)(-1)+0+1*1 = 2 over sqrt(2)*sqrt(2) -> but with mean 2:
        // ra-mean = (-0.5,-0.5,1), rb-mean = (-1,0,1): cov=1.5, va=1.5, vb=2.
        let want = 1.5 / (1.5f64.sqrt() * 2.0f64.sqrt());
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn constant_side_yields_one() {
        assert_eq!(spearman(&[0.5, 0.5], &[0.1, 0.9]).unwrap(), 1.0);
    }
}
