//! Order statistics on sorted samples (nearest-rank conventions) and the
//! fixed numeric formatting used in artifacts.

/// 1-based nearest rank for percentile `p` of `n` observations.
fn rank(n: usize, p: f64) -> usize {
    let r = (p * n as f64 / 100.0 - 1e-9).ceil();
    (r.max(1.0) as usize).min(n)
}

/// Smallest value with at least `p` percent of observations at or below it.
/// `sorted` must be ascending and non-empty.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    sorted[rank(sorted.len(), p) - 1]
}

/// Mirror of [`nearest_rank`]: largest value with at least `p` percent of
/// observations at or above it.
pub fn nearest_rank_lower(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    sorted[n - rank(n, p)]
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median of an ascending slice; the lower middle element for even counts.
pub fn median_lower(sorted: &[f64]) -> f64 {
    sorted[(sorted.len() - 1) / 2]
}

/// Round to `digits` significant digits.
pub fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let mag = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(digits - 1 - mag);
    let r = (x * scale).round() / scale;
    // canonical shortest representation of the rounded value
    format!("{:.*e}", (digits - 1) as usize, r).parse().unwrap_or(r)
}

/// Six significant digits, as written to every CSV/JSON artifact.
pub fn sig6(x: f64) -> f64 {
    round_sig(x, 6)
}

pub fn fmt_sig6(x: f64) -> String {
    format!("{}", sig6(x))
}

/// Coordinates keep seven decimals (about 1 cm).
pub fn round_coord(x: f64) -> f64 {
    (x * 1e7).round() / 1e7
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 95.0), 95.0);
        assert_eq!(nearest_rank(&v, 90.0), 90.0);
        assert_eq!(nearest_rank(&v, 5.0), 5.0);
        assert_eq!(nearest_rank_lower(&v, 95.0), 6.0);
        assert_eq!(nearest_rank(&[3.0], 50.0), 3.0);
        let w: Vec<f64> = (1..=95).map(f64::from).collect();
        assert_eq!(nearest_rank(&w, 90.0), 86.0);
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(median_lower(&[1.0, 2.0, 3.0, 4.0]), 2.0);
        assert_eq!(median_lower(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(mean(&[]), 0.0);
    }

    #[test]
    fn significant_digits() {
        assert_eq!(fmt_sig6(4.0 / 3.0), "1.33333");
        assert_eq!(fmt_sig6(1234567.0), "1234570");
        assert_eq!(fmt_sig6(0.000123456789), "0.000123457");
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(-2.5), "-2.5");
        assert_eq!(round_coord(1.234567891), 1.2345679);
    }
}
