//! Savitzky–Golay smoothing as a sliding local least-squares polynomial fit.
//!
//! Each point takes the value (and slope) of a degree-`order` polynomial
//! fitted over the `window` samples centred on it. Near the ends the first or
//! last full window is reused and its polynomial evaluated off-centre, so
//! polynomials up to degree `order` are reproduced exactly everywhere.
//! Sample times need not be uniform.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn check(n: usize, window: usize, order: usize) -> Result<()> {
    if window % 2 == 0 {
        return Err(Error::InvalidInput(format!("window {window} must be odd")));
    }
    if window <= order {
        return Err(Error::InvalidInput(format!("window {window} must exceed polynomial order {order}")));
    }
    if window > n {
        return Err(Error::InvalidInput(format!("window {window} longer than series ({n} points)")));
    }
    Ok(())
}

/// Smoothed values and first derivatives of `values(times)`.
pub fn local_polynomial_fit(
    times: &[f64],
    values: &[f64],
    window: usize,
    order: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = values.len();
    if times.len() != n {
        return Err(Error::Dimension(format!("{} times for {} values", times.len(), n)));
    }
    check(n, window, order)?;
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("times must be strictly increasing".into()));
    }
    let half = window / 2;
    let mut smooth = vec![0.0; n];
    let mut slope = vec![0.0; n];

    let mut fit_window = |start: usize, targets: std::ops::Range<usize>| -> Result<()> {
        let t = &times[start..start + window];
        let centre = 0.5 * (t[0] + t[window - 1]);
        let span = 0.5 * (t[window - 1] - t[0]);
        let vander = DMatrix::from_fn(window, order + 1, |r, c| ((t[r] - centre) / span).powi(c as i32));
        let rhs = DVector::from_column_slice(&values[start..start + window]);
        let coef = vander
            .svd(true, true)
            .solve(&rhs, 1e-14)
            .map_err(|e| Error::Numerical(format!("polynomial fit failed: {e}")))?;
        for i in targets {
            let x = (times[i] - centre) / span;
            let mut v = 0.0;
            let mut d = 0.0;
            for p in (0..=order).rev() {
                v = v * x + coef[p];
            }
            for p in (1..=order).rev() {
                d = d * x + p as f64 * coef[p];
            }
            smooth[i] = v;
            slope[i] = d / span;
        }
        Ok(())
    };

    fit_window(0, 0..half + 1)?;
    for i in half + 1..n.saturating_sub(half + 1) {
        fit_window(i - half, i..i + 1)?;
    }
    if n > half + 1 {
        fit_window(n - window, (n - half - 1).max(half + 1)..n)?;
    }
    Ok((smooth, slope))
}

/// Savitzky–Golay smoothing on a uniformly sampled series.
pub fn savgol_smooth(signal: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    check(signal.len(), window, order)?;
    let idx: Vec<f64> = (0..signal.len()).map(|i| i as f64).collect();
    Ok(local_polynomial_fit(&idx, signal, window, order)?.0)
}
