use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{add_noise_with, subsample_times, NoiseSpec, NoiseTarget};
use crate::error::{Error, Result};
use crate::numeric::{cumulative_trapezoid, trapezoid};
use crate::reaction_model::ReactionNetwork;
use crate::reactor_sim::{PulseRecord, ReactorConfig};

/// What the experimenter can see. `Ideal` observes every species in the thin
/// zone; `Practical` observes gases only and infers surface uptake.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ideal,
    Practical,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Ideal => "ideal",
            Mode::Practical => "practical",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSpec {
    pub n_points: usize,
    /// Boundary (s) between the densely and sparsely sampled parts.
    pub split_time: f64,
    /// Share of points placed at or before `split_time`.
    pub split_fraction: f64,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec { n_points: 200, split_time: 0.5, split_fraction: 0.5 }
    }
}

/// Geometry of the catalyst zone as seen by the thin-zone balance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThinZone {
    pub voidage: f64,
    /// cm
    pub length: f64,
    /// nmol/cm³
    pub site_density: f64,
}

impl ThinZone {
    pub fn from_reactor(r: &ReactorConfig) -> Self {
        ThinZone { voidage: r.catalyst_voidage(), length: r.catalyst_length(), site_density: r.site_density }
    }
}

/// One pulse on the full output grid after noise has been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub pulse: usize,
    pub times: Vec<f64>,
    /// `[species][time]`, nmol/cm³; surface rows are empty in practical mode.
    pub conc: Vec<Vec<f64>>,
    /// Boundary fluxes; noiseless unless noise targets them.
    pub flux_in: Vec<Vec<f64>>,
    pub flux_out: Vec<Vec<f64>>,
    pub outlet_flux: Vec<Vec<f64>>,
    /// `(f_in − f_out) / l_cat`, `[gas][time]`, nmol/(cm³ s).
    pub net_flux: Vec<Vec<f64>>,
    /// Surface inventory of each element inferred from the gas balance,
    /// `[element][time]`, nmol/cm³.
    pub uptake: Vec<Vec<f64>>,
    /// nmol of each gas leaving the reactor.
    pub moments: Vec<f64>,
}

/// Apply noise and derive net flux, moments and element uptake for a pulse train.
///
/// Noise is drawn from one stream per call in a fixed order (per pulse:
/// observed concentrations, then net flux or inlet and outlet fluxes
/// depending on the noise target, then exit flow), each series with its own
/// standard deviation. Uptake integrates the gas-phase
/// element balance of the catalyst zone and carries over between pulses; the
/// train is assumed to start from the recorded initial surface.
pub fn observe_pulses(
    records: &[PulseRecord],
    net: &ReactionNetwork,
    zone: &ThinZone,
    mode: Mode,
    noise: &NoiseSpec,
) -> Result<Vec<Observation>> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no pulses to observe".into()));
    }
    if mode == Mode::Ideal && noise.level != 0.0 {
        return Err(Error::config("noise.level", "ideal mode observes noiseless data; use practical mode for noise"));
    }
    if !(noise.level >= 0.0 && noise.level.is_finite()) {
        return Err(Error::config("noise.level", format!("{} is not a non-negative number", noise.level)));
    }
    let n_gas = net.n_gas();
    let n_species = net.n_species();
    let n_elem = net.elements().len();
    let mut rng = noise.rng();
    let mut carry: Vec<f64> = (0..n_elem)
        .map(|e| (n_gas..n_species).map(|s| net.element_count(e, s) as f64 * records[0].surface_initial[s - n_gas]).sum())
        .collect();

    let mut out = Vec::with_capacity(records.len());
    for (p, rec) in records.iter().enumerate() {
        if rec.species.len() != n_species || rec.n_gas != n_gas {
            return Err(Error::Dimension(format!("pulse {p} species do not match network {}", net.name())));
        }
        let observed = match mode {
            Mode::Ideal => n_species,
            Mode::Practical => n_gas,
        };
        let mut noisy = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter().map(|r| add_noise_with(&mut rng, r, noise.level)).collect()
        };
        let mut conc = noisy(&rec.thin_zone_conc[..observed]);
        conc.resize(n_species, Vec::new());
        let difference = |fin: &[Vec<f64>], fout: &[Vec<f64>]| -> Vec<Vec<f64>> {
            fin.iter().zip(fout).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) / zone.length).collect()).collect()
        };
        let (flux_in, flux_out, net_flux) = match noise.target {
            NoiseTarget::Estimates => {
                let net_flux = noisy(&difference(&rec.flux_in, &rec.flux_out));
                (rec.flux_in.clone(), rec.flux_out.clone(), net_flux)
            }
            NoiseTarget::BoundaryFluxes => {
                let (fin, fout) = (noisy(&rec.flux_in), noisy(&rec.flux_out));
                let net_flux = difference(&fin, &fout);
                (fin, fout, net_flux)
            }
        };
        let outlet_flux = noisy(&rec.outlet_flux);
        let moments: Vec<f64> = outlet_flux.iter().map(|f| trapezoid(&rec.times, f)).collect();

        let nt = rec.times.len();
        let mut uptake = Vec::with_capacity(n_elem);
        for (e, start) in carry.iter_mut().enumerate() {
            let weights: Vec<f64> = (0..n_gas).map(|g| net.element_count(e, g) as f64).collect();
            let source: Vec<f64> =
                (0..nt).map(|t| weights.iter().zip(&net_flux).map(|(w, f)| w * f[t]).sum()).collect();
            let integral = cumulative_trapezoid(&rec.times, &source);
            let holdup = |t: usize| -> f64 { weights.iter().zip(&conc).map(|(w, c)| w * c[t]).sum() };
            let h0 = holdup(0);
            let u: Vec<f64> =
                (0..nt).map(|t| *start + integral[t] - zone.voidage * (holdup(t) - h0)).collect();
            *start = *u.last().expect("nonempty time grid");
            uptake.push(u);
        }
        out.push(Observation {
            pulse: p,
            times: rec.times.clone(),
            conc,
            flux_in,
            flux_out,
            outlet_flux,
            net_flux,
            uptake,
            moments,
        });
    }
    Ok(out)
}

/// Divisors that bring each quantity to order one. Fitted from training pulses only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingInfo {
    /// Per species, nmol/cm³.
    pub species: Vec<f64>,
    /// Per gas, nmol.
    pub moments: Vec<f64>,
    /// Largest absolute element uptake, nmol/cm³.
    pub uptake: f64,
}

impl ScalingInfo {
    pub fn scale(&self, species: usize, c: f64) -> f64 {
        c / self.species[species]
    }

    pub fn unscale(&self, species: usize, n: f64) -> f64 {
        n * self.species[species]
    }
}

fn positive_or_one(x: f64) -> f64 {
    if x > 0.0 && x.is_finite() {
        x
    } else {
        1.0
    }
}

/// Subsampled, scaled observations of one pulse.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseSamples {
    pub pulse: usize,
    pub times: Vec<f64>,
    /// Raw zeroth moments (nmol) of the pulse.
    pub moments: Vec<f64>,
    /// Scaled concentrations `[species][sample]`; empty for unobserved species.
    pub targets: Vec<Vec<f64>>,
    /// `[gas][sample]`, nmol/(cm³ s).
    pub net_flux: Vec<Vec<f64>>,
    /// `[element][sample]`, nmol/cm³.
    pub uptake: Vec<Vec<f64>>,
}

impl PulseSamples {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub mode: Mode,
    pub species: Vec<String>,
    pub n_gas: usize,
    pub elements: Vec<String>,
    pub observed: Vec<bool>,
    pub zone: ThinZone,
    pub noise: NoiseSpec,
    pub scaling: ScalingInfo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseDataset {
    pub meta: DatasetMeta,
    pub train: Vec<PulseSamples>,
    pub test: Vec<PulseSamples>,
}

fn check_pulses(name: &str, idx: &[usize], n: usize) -> Result<()> {
    if let Some(&p) = idx.iter().find(|&&p| p >= n) {
        return Err(Error::config(name, format!("pulse {p} not simulated ({n} pulses available)")));
    }
    let mut seen = idx.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != idx.len() {
        return Err(Error::config(name, "duplicate pulse index"));
    }
    Ok(())
}

/// Observe, subsample and scale a simulated pulse train.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    records: &[PulseRecord],
    net: &ReactionNetwork,
    zone: &ThinZone,
    mode: Mode,
    noise: &NoiseSpec,
    sampling: &SamplingSpec,
    train: &[usize],
    test: &[usize],
) -> Result<PulseDataset> {
    if train.is_empty() {
        return Err(Error::config("dataset.train_pulses", "at least one training pulse is required"));
    }
    check_pulses("dataset.train_pulses", train, records.len())?;
    check_pulses("dataset.test_pulses", test, records.len())?;
    if let Some(p) = test.iter().find(|p| train.contains(p)) {
        return Err(Error::config("dataset.test_pulses", format!("pulse {p} is also a training pulse")));
    }
    let obs = observe_pulses(records, net, zone, mode, noise)?;
    let idx = subsample_times(&obs[0].times, sampling.n_points, sampling.split_time, sampling.split_fraction)
        .map_err(|e| Error::config("sampling", e.to_string()))?;

    let n_gas = net.n_gas();
    let n_species = net.n_species();
    let observed: Vec<bool> = (0..n_species).map(|i| i < n_gas || mode == Mode::Ideal).collect();

    let obs = &obs;
    let idx = &idx;
    let max_abs = |values: &mut dyn Iterator<Item = f64>| positive_or_one(values.fold(0.0_f64, |m, v| m.max(v.abs())));
    let uptake_scale = max_abs(
        &mut train.iter().flat_map(|&p| idx.iter().flat_map(move |&t| obs[p].uptake.iter().map(move |u| u[t]))),
    );
    let species_scale: Vec<f64> = (0..n_species)
        .map(|i| {
            if observed[i] {
                max_abs(&mut train.iter().flat_map(|&p| idx.iter().map(move |&t| obs[p].conc[i][t])))
            } else {
                uptake_scale
            }
        })
        .collect();
    let moment_scale: Vec<f64> = (0..n_gas).map(|g| max_abs(&mut train.iter().map(|&p| obs[p].moments[g]))).collect();
    let scaling = ScalingInfo { species: species_scale, moments: moment_scale, uptake: uptake_scale };

    let sample = |p: usize| -> PulseSamples {
        let o = &obs[p];
        let pick = |row: &[f64]| -> Vec<f64> { idx.iter().map(|&t| row[t]).collect() };
        PulseSamples {
            pulse: p,
            times: pick(&o.times),
            moments: o.moments.clone(),
            targets: (0..n_species)
                .map(|i| {
                    if observed[i] {
                        idx.iter().map(|&t| scaling.scale(i, o.conc[i][t])).collect()
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
            net_flux: o.net_flux.iter().map(|r| pick(r)).collect(),
            uptake: o.uptake.iter().map(|r| pick(r)).collect(),
        }
    };
    let meta = DatasetMeta {
        mode,
        species: net.species_names().iter().map(|s| s.to_string()).collect(),
        n_gas,
        elements: net.elements().to_vec(),
        observed: observed.clone(),
        zone: *zone,
        noise: *noise,
        scaling: scaling.clone(),
    };
    Ok(PulseDataset {
        train: train.iter().map(|&p| sample(p)).collect(),
        test: test.iter().map(|&p| sample(p)).collect(),
        meta,
    })
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::artifact(path, e.to_string())
}

impl PulseDataset {
    fn header(&self) -> Vec<String> {
        let m = &self.meta;
        let gases = &m.species[..m.n_gas];
        let mut h: Vec<String> = ["pulse", "t", "u"].iter().map(|s| s.to_string()).collect();
        h.extend(gases.iter().map(|g| format!("m0_{g}")));
        h.extend(m.species.iter().cloned());
        h.extend(gases.iter().map(|g| format!("g_{g}")));
        h.extend(m.elements.iter().map(|e| format!("U_{e}")));
        h
    }

    fn write_samples(&self, path: &Path, pulses: &[PulseSamples]) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(self.header()).map_err(|e| csv_err(path, e))?;
        for s in pulses {
            for t in 0..s.len() {
                let mut row = vec![s.pulse.to_string(), format!("{}", s.times[t]), format!("{}", s.times[t].ln())];
                row.extend(s.moments.iter().map(|m| format!("{m}")));
                row.extend(s.targets.iter().map(|c| c.get(t).map(|v| format!("{v}")).unwrap_or_default()));
                row.extend(s.net_flux.iter().map(|g| format!("{}", g[t])));
                row.extend(s.uptake.iter().map(|u| format!("{}", u[t])));
                w.write_record(&row).map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| csv_err(path, e))?;
        Ok(())
    }

    fn read_samples(&self, path: &Path) -> Result<Vec<PulseSamples>> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let m = &self.meta;
        let (ng, ns, ne) = (m.n_gas, m.species.len(), m.elements.len());
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
        if header != self.header() {
            return Err(csv_err(path, "column layout does not match dataset metadata"));
        }
        let mut out: Vec<PulseSamples> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|e| csv_err(path, format!("column {}: {e}", header[i])))
            };
            let pulse: usize = rec[0].parse().map_err(|e| csv_err(path, format!("pulse: {e}")))?;
            if out.last().map(|s| s.pulse) != Some(pulse) {
                out.push(PulseSamples {
                    pulse,
                    times: Vec::new(),
                    moments: (0..ng).map(|g| num(3 + g)).collect::<Result<_>>()?,
                    targets: vec![Vec::new(); ns],
                    net_flux: vec![Vec::new(); ng],
                    uptake: vec![Vec::new(); ne],
                });
            }
            let s = out.last_mut().expect("pushed above");
            s.times.push(num(1)?);
            let base = 3 + ng;
            for i in 0..ns {
                if m.observed[i] {
                    s.targets[i].push(num(base + i)?);
                }
            }
            for g in 0..ng {
                s.net_flux[g].push(num(base + ns + g)?);
            }
            for e in 0..ne {
                s.uptake[e].push(num(base + ns + ng + e)?);
            }
        }
        Ok(out)
    }

    /// Write `train.csv`, `test.csv`, `scaling.csv` and `dataset.toml` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_samples(&dir.join("train.csv"), &self.train)?;
        self.write_samples(&dir.join("test.csv"), &self.test)?;
        let path = dir.join("scaling.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(["quantity", "name", "scale"]).map_err(|e| csv_err(&path, e))?;
        let s = &self.meta.scaling;
        for (name, v) in self.meta.species.iter().zip(&s.species) {
            w.write_record(["concentration", name, &format!("{v}")]).map_err(|e| csv_err(&path, e))?;
        }
        for (name, v) in self.meta.species.iter().zip(&s.moments) {
            w.write_record(["moment", name, &format!("{v}")]).map_err(|e| csv_err(&path, e))?;
        }
        w.write_record(["uptake", "all", &format!("{}", s.uptake)]).map_err(|e| csv_err(&path, e))?;
        w.flush().map_err(|e| csv_err(&path, e))?;
        let meta = toml::to_string(&self.meta).map_err(|e| Error::Numerical(format!("serialising dataset metadata: {e}")))?;
        fs::write(dir.join("dataset.toml"), meta)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("dataset.toml");
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let meta: DatasetMeta = toml::from_str(&fs::read_to_string(&path)?).map_err(|e| csv_err(&path, e))?;
        let mut ds = PulseDataset { meta, train: Vec::new(), test: Vec::new() };
        ds.train = ds.read_samples(&dir.join("train.csv"))?;
        ds.test = ds.read_samples(&dir.join("test.csv"))?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reaction_model::RateConstants;
    use crate::reactor_sim::{simulate_pulse_train, PulseSpec};

    fn train(n: usize, horizon: f64) -> (ReactorConfig, ReactionNetwork, Vec<PulseRecord>) {
        let r = ReactorConfig { time_horizon: horizon, ..Default::default() };
        let net = ReactionNetwork::co_oxidation();
        let pulse = PulseSpec { intensities: vec![1.0, 1.0, 0.0], injection_width: None };
        let recs = simulate_pulse_train(&r, &net, &RateConstants::co_oxidation_reference(), &pulse, n).unwrap();
        (r, net, recs)
    }

    #[test]
    fn uptake_tracks_surface_inventory() {
        let (r, net, recs) = train(3, 2.0);
        let obs = observe_pulses(&recs, &net, &ThinZone::from_reactor(&r), Mode::Ideal, &NoiseSpec::none()).unwrap();
        let total = r.site_density;
        for (o, rec) in obs.iter().zip(&recs) {
            for t in (0..o.times.len()).step_by(50) {
                let surf = rec.surface_at(t);
                // C on CO*, O on CO* + O*
                let c = surf[0];
                let ox = surf[0] + surf[1];
                assert!((o.uptake[0][t] - c).abs() < 0.02 * total, "C uptake {} vs {c}", o.uptake[0][t]);
                assert!((o.uptake[1][t] - ox).abs() < 0.02 * total, "O uptake {} vs {ox}", o.uptake[1][t]);
            }
        }
        // O accumulates: uptake positive and growing from pulse to pulse
        assert!(obs[1].uptake[1].last().unwrap() > obs[0].uptake[1].last().unwrap());
        assert!(*obs[0].uptake[1].last().unwrap() > 0.0);
    }

    #[test]
    fn ideal_mode_rejects_noise() {
        let (r, net, recs) = train(1, 0.2);
        let err = observe_pulses(&recs, &net, &ThinZone::from_reactor(&r), Mode::Ideal, &NoiseSpec::new(0.5, 1));
        assert!(matches!(err, Err(Error::Config { .. })));
    }

    #[test]
    fn dataset_round_trips_through_csv() {
        let (r, net, recs) = train(3, 1.0);
        let sampling = SamplingSpec { n_points: 40, ..Default::default() };
        let noise = NoiseSpec::new(0.5, 9);
        let ds = build_dataset(&recs, &net, &ThinZone::from_reactor(&r), Mode::Practical, &noise, &sampling, &[0, 2], &[1])
            .unwrap();
        assert!(ds.train[0].targets[3].is_empty());
        assert_eq!(ds.train[0].targets[0].len(), 40);
        let max = ds.train.iter().flat_map(|s| s.targets[0].iter()).fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!((max - 1.0).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = PulseDataset::read_dir(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn scaling_round_trip() {
        let s = ScalingInfo { species: vec![0.37, 12.5], moments: vec![1.0], uptake: 3.0 };
        for &c in &[0.0, 1e-7, 0.29, 14.3] {
            for i in 0..2 {
                let back = s.unscale(i, s.scale(i, c));
                assert!((back - c).abs() <= 1e-12 * c.abs().max(1.0));
            }
        }
    }

    #[test]
    fn overlapping_split_rejected() {
        let (r, net, recs) = train(2, 0.6);
        let sampling = SamplingSpec { n_points: 20, ..Default::default() };
        let zone = ThinZone::from_reactor(&r);
        let res = build_dataset(&recs, &net, &zone, Mode::Ideal, &NoiseSpec::none(), &sampling, &[0], &[0]);
        assert!(matches!(res, Err(Error::Config { .. })));
        let res = build_dataset(&recs, &net, &zone, Mode::Ideal, &NoiseSpec::none(), &sampling, &[5], &[]);
        assert!(matches!(res, Err(Error::Config { .. })));
    }
}
