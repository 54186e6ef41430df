//! Derivative-matching baseline: smooth the observed thin-zone signals,
//! differentiate them numerically and solve for the rate constants by
//! nonnegative linear least squares.
//!
//! This is a simplified surrogate for simultaneous orthogonal-collocation
//! fitting. Because `r = M (k ∘ ψ(c))`, the balance residual is linear in
//! `k` once `c` and `dc/dt` are fixed, so the fit reduces to NNLS with basis
//! columns `M[:, j] ψ_j(ĉ(t))`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data_pipeline::{local_polynomial_fit, Mode, Observation, ThinZone};
use crate::error::{Error, Result};
use crate::reaction_model::ReactionNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase", deny_unknown_fields)]
pub enum Smoothing {
    /// Central differences on the raw samples.
    None,
    /// Local polynomial of degree `order` over `window` samples.
    Savgol { window: usize, order: usize },
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::Savgol { window: 11, order: 3 }
    }
}

impl std::fmt::Display for Smoothing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Smoothing::None => write!(f, "none"),
            Smoothing::Savgol { window, order } => write!(f, "savgol(window={window}, order={order})"),
        }
    }
}

/// Second-order finite-difference derivative on a nonuniform grid.
pub fn central_differences(times: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    let n = values.len();
    if times.len() != n {
        return Err(Error::Dimension(format!("{} times for {} values", times.len(), n)));
    }
    if n < 3 {
        return Err(Error::InvalidInput("at least three samples are needed".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("times must be strictly increasing".into()));
    }
    // three-point Lagrange derivative at node `at` of the stencil starting at `s`
    let stencil = |s: usize, at: usize| -> f64 {
        let (t0, t1, t2) = (times[s], times[s + 1], times[s + 2]);
        let x = times[at];
        let l0 = ((x - t1) + (x - t2)) / ((t0 - t1) * (t0 - t2));
        let l1 = ((x - t0) + (x - t2)) / ((t1 - t0) * (t1 - t2));
        let l2 = ((x - t0) + (x - t1)) / ((t2 - t0) * (t2 - t1));
        l0 * values[s] + l1 * values[s + 1] + l2 * values[s + 2]
    };
    Ok((0..n)
        .map(|i| match i {
            0 => stencil(0, 0),
            _ if i == n - 1 => stencil(n - 3, n - 1),
            _ => stencil(i - 1, i),
        })
        .collect())
}

/// Smoothed values and time derivatives of one signal.
pub fn estimate_derivatives(times: &[f64], values: &[f64], smoothing: Smoothing) -> Result<(Vec<f64>, Vec<f64>)> {
    match smoothing {
        Smoothing::None => Ok((values.to_vec(), central_differences(times, values)?)),
        Smoothing::Savgol { window, order } => {
            if order == 0 {
                return Err(Error::config("baseline.smoothing.order", "must be at least 1 to differentiate"));
            }
            local_polynomial_fit(times, values, window, order).map_err(|e| match e {
                Error::InvalidInput(m) => Error::config("baseline.smoothing", m),
                other => other,
            })
        }
    }
}

/// Lawson–Hanson nonnegative least squares: `min ‖Ax − b‖` subject to `x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (rows, n) = a.shape();
    if b.len() != rows {
        return Err(Error::Dimension(format!("{} right-hand sides for {rows} rows", b.len())));
    }
    let tol = 1e-12 * a.amax().max(1.0) * b.amax().max(1.0) * rows.max(1) as f64;
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let solve_passive = |passive: &[bool]| -> Result<DVector<f64>> {
        let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let sub = DMatrix::from_fn(rows, cols.len(), |r, c| a[(r, cols[c])]);
        let z = sub.svd(true, true).solve(b, 1e-14).map_err(|e| Error::Numerical(format!("least squares: {e}")))?;
        let mut full = DVector::zeros(n);
        for (c, &j) in cols.iter().enumerate() {
            full[j] = z[c];
        }
        Ok(full)
    };

    for _ in 0..3 * n + 10 {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(enter) = candidate else { return Ok(x) };
        passive[enter] = true;
        loop {
            let z = solve_passive(&passive)?;
            if (0..n).filter(|&j| passive[j]).all(|j| z[j] > 0.0) {
                x = z;
                break;
            }
            let mut step = f64::INFINITY;
            for j in (0..n).filter(|&j| passive[j] && z[j] <= 0.0) {
                step = step.min(x[j] / (x[j] - z[j]));
            }
            x += (z - &x) * step;
            for j in 0..n {
                if passive[j] && x[j] <= 1e-300 {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
        }
    }
    Err(Error::Numerical("NNLS did not terminate".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamStatus {
    Converged,
    /// Basis column negligible: the data carry no information on this step.
    Unidentifiable,
    /// Part of a near-null direction of the normal equations.
    IllConditioned,
    /// Held at the nonnegativity bound.
    AtBound,
}

impl ParamStatus {
    pub fn converged(self) -> bool {
        self == ParamStatus::Converged
    }
}

impl std::fmt::Display for ParamStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ParamStatus::Converged => "converged",
            ParamStatus::Unidentifiable => "unidentifiable",
            ParamStatus::IllConditioned => "ill_conditioned",
            ParamStatus::AtBound => "at_bound",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub k: Vec<f64>,
    pub status: Vec<ParamStatus>,
    /// `‖A k − b‖₂` in the physical units of the balance.
    pub residual_norm: f64,
    /// Condition number of the column-normalised normal equations.
    pub condition_number: f64,
    pub rows: usize,
    pub smoothing: Smoothing,
}

/// Column-norm cut-off relative to the largest column.
pub const COLUMN_TOLERANCE: f64 = 1e-10;
/// Normal-equation condition number beyond which weak directions are flagged.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Time series of one pulse ready for regression, `[species][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceSeries {
    pub conc: Vec<Vec<f64>>,
    pub rate: Vec<Vec<f64>>,
    /// Net gas flux, `[gas][t]`.
    pub net_flux: Vec<Vec<f64>>,
}

/// Regresses `k` from concentrations, their derivatives and the net gas flux.
/// Rows are `e·dĉ/dt − g` for gases and `dĉ/dt` for adspecies, the latter
/// only where `observed` is set.
pub fn fit_k_linear_ls(
    series: &[BalanceSeries],
    net: &ReactionNetwork,
    voidage: f64,
    observed: &[bool],
    smoothing: Smoothing,
) -> Result<BaselineResult> {
    let n = net.n_species();
    let n_gas = net.n_gas();
    let m = net.n_reactions();
    if observed.len() != n {
        return Err(Error::Dimension(format!("{} observation flags for {n} species", observed.len())));
    }
    let mut a_rows: Vec<Vec<f64>> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    let mut psi = vec![0.0; m];
    for s in series {
        if s.conc.len() != n || s.rate.len() != n || s.net_flux.len() != n_gas {
            return Err(Error::Dimension("series rows do not match the network".into()));
        }
        let nt = s.conc[0].len();
        for t in 0..nt {
            let c: Vec<f64> = (0..n).map(|i| s.conc[i][t].max(0.0)).collect();
            net.psi_into(&c, &mut psi);
            for i in (0..n).filter(|&i| observed[i]) {
                let target = if i < n_gas { voidage * s.rate[i][t] - s.net_flux[i][t] } else { s.rate[i][t] };
                if !target.is_finite() {
                    return Err(Error::Numerical(format!("non-finite regression target for species {i}")));
                }
                a_rows.push((0..m).map(|j| net.stoich(i, j) as f64 * psi[j]).collect());
                b.push(target);
            }
        }
    }
    if b.is_empty() {
        return Err(Error::InvalidInput("no observed channels to regress".into()));
    }
    let rows = b.len();
    let a = DMatrix::from_fn(rows, m, |r, c| a_rows[r][c]);
    let b = DVector::from_vec(b);

    let norms: Vec<f64> = (0..m).map(|j| a.column(j).norm()).collect();
    let max_norm = norms.iter().cloned().fold(0.0, f64::max);
    let usable: Vec<bool> = norms.iter().map(|&v| v > COLUMN_TOLERANCE * max_norm && v > 0.0).collect();
    let cols: Vec<usize> = (0..m).filter(|&j| usable[j]).collect();
    let scaled = DMatrix::from_fn(rows, cols.len(), |r, c| a[(r, cols[c])] / norms[cols[c]]);

    let mut status: Vec<ParamStatus> =
        usable.iter().map(|&u| if u { ParamStatus::Converged } else { ParamStatus::Unidentifiable }).collect();
    let mut k = vec![0.0; m];
    let mut condition_number = f64::INFINITY;
    if !cols.is_empty() {
        let y = nnls(&scaled, &b)?;
        for (c, &j) in cols.iter().enumerate() {
            k[j] = y[c] / norms[j];
        }
        let normal = scaled.transpose() * &scaled;
        let eig = SymmetricEigen::new(normal);
        let lmax = eig.eigenvalues.max();
        let lmin = eig.eigenvalues.min();
        condition_number = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
        for (e, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda <= lmax / CONDITION_LIMIT {
                let v = eig.eigenvectors.column(e);
                for (c, &j) in cols.iter().enumerate() {
                    if v[c].abs() > 0.1 {
                        status[j] = ParamStatus::IllConditioned;
                    }
                }
            }
        }
        for &j in &cols {
            if k[j] == 0.0 && status[j] == ParamStatus::Converged {
                status[j] = ParamStatus::AtBound;
            }
        }
    }
    let kv = DVector::from_column_slice(&k);
    let residual_norm = (&a * kv - &b).norm();
    Ok(BaselineResult { k, status, residual_norm, condition_number, rows, smoothing })
}

/// Adspecies concentrations implied by element uptake and the site balance,
/// solved in the least-squares sense at every time, `[surface species][t]`.
pub fn reconstruct_adspecies(net: &ReactionNetwork, uptake: &[Vec<f64>], site_density: f64) -> Result<Vec<Vec<f64>>> {
    let n_gas = net.n_gas();
    let n_surf = net.n_surface();
    let n_elem = net.elements().len();
    if uptake.len() != n_elem {
        return Err(Error::Dimension(format!("{} uptake rows for {n_elem} elements", uptake.len())));
    }
    let nt = uptake.first().map_or(0, Vec::len);
    let sys = DMatrix::from_fn(n_elem + 1, n_surf, |r, c| {
        if r < n_elem {
            net.element_count(r, n_gas + c) as f64
        } else {
            net.site_counts()[n_gas + c] as f64
        }
    });
    let svd = sys.svd(true, true);
    if svd.rank(1e-12) < n_surf {
        return Err(Error::InvalidInput("element uptake and site balance do not determine every adspecies".into()));
    }
    let mut out = vec![vec![0.0; nt]; n_surf];
    for t in 0..nt {
        let mut rhs = DVector::zeros(n_elem + 1);
        for e in 0..n_elem {
            rhs[e] = uptake[e][t];
        }
        rhs[n_elem] = site_density;
        let x = svd.solve(&rhs, 1e-12).map_err(|e| Error::Numerical(e.to_string()))?;
        for s in 0..n_surf {
            out[s][t] = x[s];
        }
    }
    Ok(out)
}

/// Builds regression series from observed pulses. Gas channels (and, in
/// ideal mode, adspecies) are smoothed and differentiated; in practical mode
/// adspecies come from [`reconstruct_adspecies`] on the uptake curves.
pub fn series_from_observations(
    observations: &[Observation],
    net: &ReactionNetwork,
    zone: &ThinZone,
    mode: Mode,
    smoothing: Smoothing,
) -> Result<Vec<BalanceSeries>> {
    let n = net.n_species();
    let n_gas = net.n_gas();
    observations
        .iter()
        .map(|obs| {
            let mut conc = vec![Vec::new(); n];
            let mut rate = vec![Vec::new(); n];
            let surface = match mode {
                Mode::Ideal => None,
                Mode::Practical => Some(reconstruct_adspecies(net, &obs.uptake, zone.site_density)?),
            };
            for i in 0..n {
                let raw = match (&surface, i >= n_gas) {
                    (Some(s), true) => &s[i - n_gas],
                    _ => &obs.conc[i],
                };
                let (c, d) = estimate_derivatives(&obs.times, raw, smoothing)?;
                conc[i] = c;
                rate[i] = d;
            }
            let net_flux = match smoothing {
                Smoothing::None => obs.net_flux.clone(),
                Smoothing::Savgol { .. } => obs
                    .net_flux
                    .iter()
                    .map(|g| estimate_derivatives(&obs.times, g, smoothing).map(|r| r.0))
                    .collect::<Result<_>>()?,
            };
            Ok(BalanceSeries { conc, rate, net_flux })
        })
        .collect()
}

/// Full baseline fit on observed pulses.
pub fn fit_baseline(
    observations: &[Observation],
    net: &ReactionNetwork,
    zone: &ThinZone,
    mode: Mode,
    smoothing: Smoothing,
) -> Result<BaselineResult> {
    if observations.is_empty() {
        return Err(Error::InvalidInput("no pulses for the baseline".into()));
    }
    let series = series_from_observations(observations, net, zone, mode, smoothing)?;
    let observed: Vec<bool> = (0..net.n_species()).map(|i| mode == Mode::Ideal || i < net.n_gas()).collect();
    fit_k_linear_ls(&series, net, zone.voidage, &observed, smoothing)
}
