//! Small quadrature and interpolation helpers shared across modules.

/// Trapezoidal integral of `f` sampled at `t`.
pub fn trapezoid(t: &[f64], f: &[f64]) -> f64 {
    t.windows(2)
        .zip(f.windows(2))
        .map(|(t, f)| 0.5 * (t[1] - t[0]) * (f[0] + f[1]))
        .sum()
}

/// Running trapezoidal integral, starting at zero.
pub fn cumulative_trapezoid(t: &[f64], f: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.len());
    let mut acc = 0.0;
    if !t.is_empty() {
        out.push(0.0);
    }
    for i in 1..t.len() {
        acc += 0.5 * (t[i] - t[i - 1]) * (f[i] + f[i - 1]);
        out.push(acc);
    }
    out
}

/// Piecewise-linear interpolation on a sorted grid, clamped at the ends.
pub fn interp_linear(t: &[f64], f: &[f64], x: f64) -> f64 {
    debug_assert!(!t.is_empty());
    if x <= t[0] {
        return f[0];
    }
    let last = t.len() - 1;
    if x >= t[last] {
        return f[last];
    }
    let i = t.partition_point(|&v| v <= x) - 1;
    let w = (x - t[i]) / (t[i + 1] - t[i]);
    f[i] + w * (f[i + 1] - f[i])
}

/// Slope of the linear interpolant at `x` (right-continuous at nodes).
pub fn interp_slope(t: &[f64], f: &[f64], x: f64) -> f64 {
    if t.len() < 2 || x < t[0] || x >= t[t.len() - 1] {
        return 0.0;
    }
    let i = t.partition_point(|&v| v <= x) - 1;
    (f[i + 1] - f[i]) / (t[i + 1] - t[i])
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}
