use crate::stats::median_mad;

/// One week of hourly bins.
pub const DEFAULT_WINDOW: usize = 168;
/// Scales the MAD to a standard-deviation estimate for normal data.
pub const MAD_SCALE: f64 = 1.4826;

/// `(x - median(W)) / (1 + 1.4826 mad(W))` for a window `W` that already
/// contains `x`. Undefined for windows of fewer than two values.
pub fn magnitude_of(window: &[f64], x: f64) -> Option<f64> {
    if window.len() < 2 {
        return None;
    }
    let (med, mad) = median_mad(window)?;
    Some((x - med) / (1.0 + MAD_SCALE * mad))
}

/// Magnitude of every point of `series` against the trailing window of
/// `window` values ending at (and including) that point.
pub fn magnitude(series: &[f64], window: usize) -> Vec<Option<f64>> {
    let window = window.max(1);
    (0..series.len())
        .map(|t| {
            let from = (t + 1).saturating_sub(window);
            magnitude_of(&series[from..=t], series[t])
        })
        .collect()
}
