//! Post-fit assessment: ODE rebuild of thin-zone curves, parity metrics,
//! rate-constant errors on an energy scale and inverse-Hessian spreads.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data_pipeline::PulseSamples;
use crate::error::{Error, Result};
use crate::kinn::KinnModel;
use crate::numeric::{interp_linear, interp_slope, mean};
use crate::reaction_model::ReactionNetwork;
use crate::stiff::{integrate, BandMatrix, StepOptions, StiffSystem};

/// Boltzmann constant in eV/K.
pub const BOLTZMANN_EV: f64 = 8.617333262e-5;

/// Thin-zone balance `e·dc/dt = g(t) + r(c)` for gases, `dc/dt = r(c)` for
/// adspecies, with `g` linearly interpolated between its samples.
struct ThinZoneOde<'a> {
    net: &'a ReactionNetwork,
    k: &'a [f64],
    g_times: &'a [f64],
    g: &'a [Vec<f64>],
    voidage: f64,
}

impl ThinZoneOde<'_> {
    fn inv_e(&self, i: usize) -> f64 {
        if i < self.net.n_gas() {
            1.0 / self.voidage
        } else {
            1.0
        }
    }
}

impl StiffSystem for ThinZoneOde<'_> {
    fn dim(&self) -> usize {
        self.net.n_species()
    }

    fn bandwidths(&self) -> (usize, usize) {
        let n = self.dim();
        (n - 1, n - 1)
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        self.net.species_rates_into(y, self.k, dy);
        for (i, d) in dy.iter_mut().enumerate() {
            let g = if i < self.net.n_gas() { interp_linear(self.g_times, &self.g[i], t) } else { 0.0 };
            *d = (*d + g) * self.inv_e(i);
        }
    }

    fn jacobian(&self, _t: f64, y: &[f64], jac: &mut BandMatrix) {
        let n = self.dim();
        let mut dense = vec![0.0; n * n];
        self.net.species_rate_jacobian_into(y, self.k, &mut dense);
        for i in 0..n {
            for l in 0..n {
                jac.add(i, l, dense[i * n + l] * self.inv_e(i));
            }
        }
    }

    fn time_derivative(&self, t: f64, _y: &[f64], out: &mut [f64]) -> bool {
        for (i, o) in out.iter_mut().enumerate() {
            *o = if i < self.net.n_gas() { interp_slope(self.g_times, &self.g[i], t) / self.voidage } else { 0.0 };
        }
        true
    }
}

/// Integrates the thin-zone ODE from `c0` over `grid` with net gas flux
/// `g[gas][t]` sampled at `g_times`. Returns `[species][grid point]`.
pub fn rebuild_ode(
    k: &[f64],
    net: &ReactionNetwork,
    g_times: &[f64],
    g: &[Vec<f64>],
    c0: &[f64],
    voidage: f64,
    grid: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if k.len() != net.n_reactions() || c0.len() != net.n_species() {
        return Err(Error::Dimension(format!(
            "{} rate constants and {} initial values for {} reactions and {} species",
            k.len(),
            c0.len(),
            net.n_reactions(),
            net.n_species()
        )));
    }
    if g.len() != net.n_gas() || g.iter().any(|row| row.len() != g_times.len()) || g_times.len() < 2 {
        return Err(Error::Dimension("net flux must have one row per gas on a grid of at least two times".into()));
    }
    if !(voidage > 0.0) {
        return Err(Error::InvalidInput(format!("voidage {voidage} must be positive")));
    }
    let sys = ThinZoneOde { net, k, g_times, g, voidage };
    let opts = StepOptions { rtol: 1e-8, atol: 1e-12, ..Default::default() };
    let mut out = vec![vec![0.0; grid.len()]; net.n_species()];
    integrate(&sys, c0, grid, &opts, |idx, _, y| {
        for (row, v) in out.iter_mut().zip(y) {
            row[idx] = *v;
        }
    })?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Parity {
    pub mae: f64,
    /// `None` when the target has no variance.
    pub r2: Option<f64>,
}

/// Mean absolute error and coefficient of determination.
pub fn parity_metrics(predicted: &[f64], target: &[f64]) -> Result<Parity> {
    if predicted.len() != target.len() {
        return Err(Error::Dimension(format!("{} predictions for {} targets", predicted.len(), target.len())));
    }
    if target.len() < 2 {
        return Err(Error::InvalidInput("parity needs at least two points".into()));
    }
    let mae = predicted.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / target.len() as f64;
    let tm = mean(target);
    let ss_tot: f64 = target.iter().map(|t| (t - tm).powi(2)).sum();
    let ss_res: f64 = predicted.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(Parity { mae, r2 })
}

/// `ln(k_fit / k_true)` per parameter; `None` where the ratio is undefined.
pub fn ln_ratios(k_fit: &[f64], k_true: &[f64]) -> Vec<Option<f64>> {
    k_fit
        .iter()
        .zip(k_true)
        .map(|(f, t)| (*f > 0.0 && *t > 0.0 && f.is_finite() && t.is_finite()).then(|| (f / t).ln()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyError {
    pub mean_abs_ln: f64,
    /// `k_B·T·mean|ln ratio|` in eV.
    pub mae_ev: f64,
    pub temperature: f64,
}

/// Rate-constant error on the free-energy scale under equal prefactors.
pub fn energy_scale_mae(k_fit: &[f64], k_true: &[f64], temperature: f64) -> Result<EnergyError> {
    if k_fit.len() != k_true.len() || k_fit.is_empty() {
        return Err(Error::Dimension(format!("{} fitted and {} reference constants", k_fit.len(), k_true.len())));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!("temperature {temperature} must be positive")));
    }
    let ratios = ln_ratios(k_fit, k_true);
    if ratios.iter().any(Option::is_none) {
        return Err(Error::InvalidInput("rate constants must be positive and finite".into()));
    }
    let mean_abs_ln = ratios.iter().flatten().map(|r| r.abs()).sum::<f64>() / ratios.len() as f64;
    Ok(EnergyError { mean_abs_ln, mae_ev: BOLTZMANN_EV * temperature * mean_abs_ln, temperature })
}

/// Spread of the rate constants from the curvature of the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub k: Vec<f64>,
    pub hessian: Vec<Vec<f64>>,
    /// Inverse (possibly ridged) Hessian.
    pub covariance: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    /// `σ_i / k_i`, `None` for `k_i = 0`.
    pub relative_sigma: Vec<Option<f64>>,
    /// `|λ_max / λ_min|` of the unregularised Hessian; infinite when singular.
    pub condition_number: f64,
    /// Diagonal shift added before inversion, 0 when none was needed.
    pub ridge: f64,
    pub regularized: bool,
    pub alpha: f64,
    pub beta: f64,
}

impl UncertaintyReport {
    /// Index of the smallest relative σ.
    pub fn most_certain(&self) -> Option<usize> {
        self.relative_sigma
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.map(|v| (i, v)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }
}

/// Smallest Hessian eigenvalue accepted without regularisation.
pub const RIDGE_THRESHOLD: f64 = 1e-10;

/// Inverse-Hessian σ from a gradient oracle. The Hessian is built by central
/// differences of `gradient` (forward differences where a central step would
/// cross zero) and symmetrised.
pub fn hessian_std<G>(k: &[f64], mut gradient: G) -> Result<UncertaintyReport>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let m = k.len();
    if m == 0 {
        return Err(Error::InvalidInput("no parameters".into()));
    }
    let mut h = DMatrix::<f64>::zeros(m, m);
    let mut probe = k.to_vec();
    let base = gradient(k)?;
    for j in 0..m {
        let step = 1e-4 * k[j].abs().max(1e-6);
        let col: Vec<f64> = if k[j] - step >= 0.0 {
            probe[j] = k[j] + step;
            let up = gradient(&probe)?;
            probe[j] = k[j] - step;
            let down = gradient(&probe)?;
            up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * step)).collect()
        } else {
            probe[j] = k[j] + step;
            let up = gradient(&probe)?;
            up.iter().zip(&base).map(|(a, b)| (a - b) / step).collect()
        };
        probe[j] = k[j];
        if col.len() != m {
            return Err(Error::Dimension(format!("gradient has {} entries for {m} parameters", col.len())));
        }
        for i in 0..m {
            h[(i, j)] = col[i];
        }
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite Hessian entry".into()));
    }
    let h = (&h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(h.clone());
    let lmin = eig.eigenvalues.min();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let condition_number = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    let regularized = lmin < RIDGE_THRESHOLD;
    let ridge = if regularized { RIDGE_THRESHOLD * lmax.max(1.0) - lmin } else { 0.0 };
    let shifted = &h + DMatrix::<f64>::identity(m, m) * ridge;
    let p = shifted.try_inverse().ok_or_else(|| Error::Numerical("Hessian could not be inverted".into()))?;
    let p = (&p + p.transpose()) * 0.5;
    let sigma: Vec<f64> = (0..m).map(|i| p[(i, i)].max(0.0).sqrt()).collect();
    let relative_sigma = sigma.iter().zip(k).map(|(s, k)| (*k != 0.0).then(|| s / k.abs())).collect();
    let rows = |a: &DMatrix<f64>| (0..m).map(|i| (0..m).map(|j| a[(i, j)]).collect()).collect();
    Ok(UncertaintyReport {
        k: k.to_vec(),
        hessian: rows(&h),
        covariance: rows(&p),
        sigma,
        relative_sigma,
        condition_number,
        ridge,
        regularized,
        alpha: 0.0,
        beta: 0.0,
    })
}

/// Inverse-Hessian σ of the fitted rate constants with the network weights
/// held at their trained values.
pub fn parameter_std(
    model: &KinnModel,
    theta: &[f64],
    samples: &[PulseSamples],
    alpha: f64,
    beta: f64,
) -> Result<UncertaintyReport> {
    let nw = model.n_weights();
    if theta.len() != model.n_params() {
        return Err(Error::Dimension(format!("{} parameters, model needs {}", theta.len(), model.n_params())));
    }
    let k: Vec<f64> = theta[nw..].iter().map(|v| v.abs()).collect();
    let mut full = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    let mut report = hessian_std(&k, |kk| {
        full[nw..].copy_from_slice(kk);
        model.loss_gradient(&full, samples, alpha, beta, &mut grad)?;
        Ok(grad[nw..].to_vec())
    })?;
    report.alpha = alpha;
    report.beta = beta;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_of_hand_examples() {
        let p = parity_metrics(&[1.0, 2.0, 4.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((p.mae - 1.0 / 3.0).abs() < 1e-15);
        let same = parity_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(same, Parity { mae: 0.0, r2: Some(1.0) });
        let flat = parity_metrics(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(flat.r2.unwrap().abs() < 1e-15);
        assert_eq!(parity_metrics(&[1.0, 1.0], &[3.0, 3.0]).unwrap().r2, None);
        assert!(parity_metrics(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn energy_scale_of_single_e_ratio() {
        let t = 0.0646 / BOLTZMANN_EV;
        let e = energy_scale_mae(&[std::f64::consts::E], &[1.0], t).unwrap();
        assert!((e.mae_ev - 0.0646).abs() < 1e-12);
        assert_eq!(energy_scale_mae(&[1.0, 2.0], &[1.0, 2.0], 800.0).unwrap().mae_ev, 0.0);
        assert!(energy_scale_mae(&[0.0], &[1.0], 800.0).is_err());
        assert_eq!(ln_ratios(&[1.0, 2.0], &[0.0, 2.0]), vec![None, Some(0.0)]);
    }

    #[test]
    fn quadratic_loss_gives_analytic_sigma() {
        let a = [1.0, 2.0, 4.0];
        let r = hessian_std(&[0.3, 1.2, 2.0], |k| Ok(k.iter().zip(&a).map(|(k, a)| 2.0 * a * k).collect())).unwrap();
        let want = [1.0 / 2f64.sqrt(), 0.5, 1.0 / (2.0 * 2f64.sqrt())];
        for (s, w) in r.sigma.iter().zip(want) {
            assert!((s - w).abs() < 1e-10, "{s} vs {w}");
        }
        assert!(!r.regularized);
        assert!((r.condition_number - 4.0).abs() < 1e-8);
    }

    #[test]
    fn singular_hessian_is_ridged_and_flagged() {
        let r = hessian_std(&[1.0, 1.0], |k| Ok(vec![2.0 * (k[0] + k[1]), 2.0 * (k[0] + k[1])])).unwrap();
        assert!(r.regularized && r.ridge > 0.0);
        assert!(r.condition_number.is_infinite() || r.condition_number > 1e12);
        assert!(r.sigma.iter().all(|s| s.is_finite()));
    }
}
