//! Small statistics shared by the summaries and the trend checks.

/// Mean and half-width of the two-sided 95% Student-t interval.
pub fn mean_ci95(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let m = x.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (m, f64::INFINITY);
    }
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, t975(n - 1) * (var / n as f64).sqrt())
}

/// 97.5% quantile of Student's t with `df` degrees of freedom.
fn t975(df: usize) -> f64 {
    const TABLE: [f64; 30] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145, 2.131,
        2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
    ];
    if df == 0 {
        f64::INFINITY
    } else if df <= 30 {
        TABLE[df - 1]
    } else {
        1.96
    }
}

/// Ranks from 1 with ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation: Pearson correlation of the ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

/// Non-decreasing means, tolerating one adjacent decrease whose 95%
/// intervals overlap.
pub fn increasing_up_to_one_inversion(means: &[f64], ci: &[f64]) -> bool {
    let inversions: Vec<usize> = (1..means.len()).filter(|&i| means[i] < means[i - 1]).collect();
    match inversions.as_slice() {
        [] => true,
        [i] => means[i - 1] - means[*i] <= ci[i - 1] + ci[*i],
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        // Hand value: ranks (1,2,3,4) against (2,1,4,3): 1 - 6*4/(4*15) = 0.6.
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[5.0, 1.0, 9.0, 7.0]) - 0.6).abs() < 1e-12);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn ci_matches_hand_value() {
        let (m, h) = mean_ci95(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((h - 4.303 / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn inversion_rule() {
        assert!(increasing_up_to_one_inversion(&[1.0, 2.0, 3.0], &[0.0; 3]));
        assert!(increasing_up_to_one_inversion(&[1.0, 2.0, 1.9], &[0.1, 0.1, 0.1]));
        assert!(!increasing_up_to_one_inversion(&[1.0, 2.0, 1.5], &[0.1, 0.1, 0.1]));
        assert!(!increasing_up_to_one_inversion(&[3.0, 2.0, 1.0], &[9.0; 3]));
    }

    proptest! {
        #[test]
        fn spearman_is_invariant_under_monotone_maps(x in prop::collection::vec(-10.0f64..10.0, 3..20)) {
            let y: Vec<f64> = x.iter().map(|v| v * v * v + 2.0 * v).collect();
            let s = spearman(&x, &y);
            prop_assume!(s.is_finite());
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
