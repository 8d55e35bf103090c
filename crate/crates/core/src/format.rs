//! Fixed-precision float rendering for CSV and JSON artifacts.

/// Significant digits used in every emitted artifact.
pub const SIGNIFICANT_DIGITS: usize = 9;

/// Renders `x` with [`SIGNIFICANT_DIGITS`] significant digits and no
/// trailing zeros.
pub fn sig(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    round_sig(x).to_string()
}

/// Rounds `x` to [`SIGNIFICANT_DIGITS`] significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .expect("scientific notation parses")
}

/// Rounds every element.
pub fn round_all(xs: &[f64]) -> Vec<f64> {
    xs.iter().copied().map(round_sig).collect()
}
