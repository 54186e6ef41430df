//! Turns simulated pulse records into training data: noise, smoothing,
//! subsampling, zeroth moments, uptake bookkeeping and scaling.

mod dataset;
mod savgol;

pub use dataset::{
    build_dataset, observe_pulses, DatasetMeta, Mode, Observation, PulseDataset, PulseSamples, SamplingSpec,
    ScalingInfo, ThinZone,
};
pub use savgol::{local_polynomial_fit, savgol_smooth};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{std_dev, trapezoid};
use crate::reactor_sim::PulseRecord;

/// Where practical-mode noise enters the observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    /// Thin-zone gas concentrations and the net flux `(f_in − f_out)/l_cat`,
    /// the signals a thin-zone reconstruction delivers.
    #[default]
    Estimates,
    /// Thin-zone gas concentrations and both boundary fluxes separately; the
    /// net flux inherits the noise of two nearly equal large signals.
    BoundaryFluxes,
}

/// Additive Gaussian noise with standard deviation `level × std(signal)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub level: f64,
    pub seed: u64,
    #[serde(default)]
    pub target: NoiseTarget,
}

impl NoiseSpec {
    pub fn new(level: f64, seed: u64) -> Self {
        NoiseSpec { level, seed, target: NoiseTarget::default() }
    }

    pub fn none() -> Self {
        NoiseSpec::new(0.0, 0)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

pub fn add_noise(signal: &[f64], spec: &NoiseSpec) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(Error::InvalidInput("cannot add noise to an empty series".into()));
    }
    Ok(add_noise_with(&mut spec.rng(), signal, spec.level))
}

/// Noise drawn from an existing stream, so several series can share one seed.
pub fn add_noise_with<R: Rng>(rng: &mut R, signal: &[f64], level: f64) -> Vec<f64> {
    let sd = level * std_dev(signal);
    if sd == 0.0 || !sd.is_finite() {
        return signal.to_vec();
    }
    let dist = Normal::new(0.0, sd).expect("finite positive width");
    signal.iter().map(|&x| x + dist.sample(rng)).collect()
}

/// Indices of a non-uniform subsample: `⌈fraction·n⌉` points spread evenly
/// over `(0, split_time]`, the rest over `(split_time, end]`. `t = 0` is never
/// selected.
pub fn subsample_times(times: &[f64], n_points: usize, split_time: f64, split_fraction: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&split_fraction) {
        return Err(Error::InvalidInput(format!("split fraction {split_fraction} outside [0, 1]")));
    }
    let early: Vec<usize> = (0..times.len()).filter(|&i| times[i] > 0.0 && times[i] <= split_time).collect();
    let late: Vec<usize> = (0..times.len()).filter(|&i| times[i] > split_time).collect();
    let n_early = ((split_fraction * n_points as f64) - 1e-9).ceil().max(0.0) as usize;
    let n_early = n_early.min(n_points);
    let n_late = n_points - n_early;
    if n_early > early.len() || n_late > late.len() {
        return Err(Error::InvalidInput(format!(
            "cannot draw {n_early} + {n_late} points from {} + {} available",
            early.len(),
            late.len()
        )));
    }
    let pick = |avail: &[usize], k: usize| -> Vec<usize> {
        (0..k).map(|j| avail[(j + 1) * avail.len() / k - 1]).collect()
    };
    let mut out = pick(&early, n_early);
    out.extend(pick(&late, n_late));
    Ok(out)
}

/// Amount of each gas leaving the reactor during the pulse (nmol).
pub fn zeroth_moments(record: &PulseRecord) -> Vec<f64> {
    record.outlet_flux.iter().map(|f| trapezoid(&record.times, f)).collect()
}
