//! Learning-curve summaries.

/// Trailing moving average; the first points average what is available.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        acc += x;
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// First iteration after which the smoothed curve stays within
/// `(1 - frac) * |final - start|` of `final`, where `start` is the first
/// smoothed value and `final` the last. `None` for an empty curve.
pub fn iterations_to_fraction(ks: &[usize], values: &[f64], frac: f64, window: usize) -> Option<usize> {
    assert_eq!(ks.len(), values.len());
    let smooth = moving_average(values, window);
    let (&start, &end) = (smooth.first()?, smooth.last()?);
    let band = (1.0 - frac) * (end - start).abs();
    if band == 0.0 {
        return Some(ks[0]);
    }
    let last_out = smooth.iter().rposition(|&v| (v - end).abs() > band);
    Some(ks[last_out.map_or(0, |i| i + 1)])
}

/// Pointwise mean of equally sampled curves.
pub fn mean_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
        .collect()
}
