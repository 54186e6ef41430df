//! Three-zone TAP reactor: Knudsen diffusion through inert/catalyst/inert
//! packing with surface chemistry confined to the catalyst zone.
//!
//! Gas species obey `e ∂c/∂t = ∂/∂x(D_i ∂c/∂x) + r_i` with a closed inlet
//! (zero flux) and an absorbing outlet (`c = 0`). Adspecies follow
//! `dθ/dt = r` without transport. The PDE is discretised by cell-centred
//! finite volumes, uniform within each zone, and integrated with the stiff
//! Rosenbrock stepper in [`crate::stiff`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reaction_model::{Phase, RateConstants, ReactionNetwork};
use crate::stiff::{integrate, BandMatrix, StepOptions, StiffSystem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReactorConfig {
    /// Inert 1, catalyst, inert 2 lengths (cm).
    pub zone_lengths: [f64; 3],
    pub voidage: [f64; 3],
    /// cm²
    pub cross_section_area: f64,
    /// Knudsen diffusivity (cm²/s) of a gas with `ref_molar_mass`.
    pub diffusion_ref: f64,
    pub ref_molar_mass: f64,
    /// Total surface sites per catalyst-zone volume (nmol/cm³).
    pub site_density: f64,
    /// Finite-volume cells per zone.
    pub grid_points: [usize; 3],
    pub time_horizon: f64,
    pub output_timestep: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for ReactorConfig {
    fn default() -> Self {
        ReactorConfig {
            zone_lengths: [1.85, 0.1, 1.85],
            voidage: [0.4, 0.4, 0.4],
            cross_section_area: 1.0,
            diffusion_ref: 16.0,
            ref_molar_mass: 40.0,
            site_density: 30.0,
            grid_points: [40, 4, 40],
            time_horizon: 3.0,
            output_timestep: 1e-3,
            rtol: 1e-6,
            atol: 1e-10,
        }
    }
}

impl ReactorConfig {
    pub fn total_length(&self) -> f64 {
        self.zone_lengths.iter().sum()
    }

    pub fn catalyst_length(&self) -> f64 {
        self.zone_lengths[1]
    }

    pub fn catalyst_voidage(&self) -> f64 {
        self.voidage[1]
    }

    /// Knudsen diffusivity scaled by inverse square root of molar mass.
    pub fn diffusivity(&self, molar_mass: f64) -> f64 {
        self.diffusion_ref * (self.ref_molar_mass / molar_mass).sqrt()
    }

    /// Output grid `0, Δt, 2Δt, ..., horizon`.
    pub fn output_times(&self) -> Vec<f64> {
        let n = (self.time_horizon / self.output_timestep).round() as usize;
        (0..=n).map(|i| i as f64 * self.output_timestep).collect()
    }

    /// Hard errors for unusable geometry; a thick catalyst zone only warns.
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        for (i, &l) in self.zone_lengths.iter().enumerate() {
            positive(&format!("reactor.zone_lengths[{i}]"), l)?;
        }
        for (i, &e) in self.voidage.iter().enumerate() {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::config(format!("reactor.voidage[{i}]"), format!("must lie in (0, 1), got {e}")));
            }
        }
        positive("reactor.cross_section_area", self.cross_section_area)?;
        positive("reactor.diffusion_ref", self.diffusion_ref)?;
        positive("reactor.ref_molar_mass", self.ref_molar_mass)?;
        positive("reactor.site_density", self.site_density)?;
        positive("reactor.time_horizon", self.time_horizon)?;
        positive("reactor.output_timestep", self.output_timestep)?;
        positive("reactor.rtol", self.rtol)?;
        positive("reactor.atol", self.atol)?;
        if self.output_timestep > self.time_horizon {
            return Err(Error::config("reactor.output_timestep", "exceeds the time horizon"));
        }
        if let Some(i) = self.grid_points.iter().position(|&g| g == 0) {
            return Err(Error::config(format!("reactor.grid_points[{i}]"), "every zone needs at least one cell"));
        }
        if self.catalyst_length() > 0.1 * self.total_length() {
            log::warn!(
                "catalyst zone is {:.1}% of the reactor; the thin-zone approximation degrades",
                100.0 * self.catalyst_length() / self.total_length()
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSpec {
    /// nmol injected per gas species at t = 0.
    pub intensities: Vec<f64>,
    /// Spatial width of the injected top hat (cm); defaults to two inlet cells.
    #[serde(default)]
    pub injection_width: Option<f64>,
}

/// Output of one simulated pulse on the configured time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseRecord {
    pub species: Vec<String>,
    pub n_gas: usize,
    pub times: Vec<f64>,
    pub intensities: Vec<f64>,
    /// nmol/s leaving the reactor, `[gas][time]`.
    pub outlet_flux: Vec<Vec<f64>>,
    /// Catalyst-zone average concentration, `[species][time]`, nmol/cm³.
    pub thin_zone_conc: Vec<Vec<f64>>,
    /// Diffusive flux through the catalyst inlet face, `[gas][time]`, nmol/(cm² s).
    pub flux_in: Vec<Vec<f64>>,
    /// Diffusive flux through the catalyst outlet face.
    pub flux_out: Vec<Vec<f64>>,
    pub surface_initial: Vec<f64>,
    pub surface_final: Vec<f64>,
    /// Per-element inventory (gas holdup + escaped + adsorbed), `[element][time]`, nmol.
    /// Empty when the record was read back from disk.
    pub element_inventory: Vec<Vec<f64>>,
}

impl PulseRecord {
    pub fn n_surface(&self) -> usize {
        self.species.len() - self.n_gas
    }

    /// Surface state at time index `t`.
    pub fn surface_at(&self, t: usize) -> Vec<f64> {
        (self.n_gas..self.species.len()).map(|i| self.thin_zone_conc[i][t]).collect()
    }
}

/// A fully vacant surface: all sites on the element-free species.
pub fn clean_surface(net: &ReactionNetwork, reactor: &ReactorConfig) -> Vec<f64> {
    (net.n_gas()..net.n_species())
        .map(|i| {
            let s = &net.species()[i];
            if s.elements.values().all(|&n| n == 0) {
                reactor.site_density / net.site_counts()[i] as f64
            } else {
                0.0
            }
        })
        .collect()
}

struct Layout {
    /// Cell widths and voidage.
    h: Vec<f64>,
    e: Vec<f64>,
    /// Index of the first unknown of every cell.
    offset: Vec<usize>,
    cat_start: usize,
    cat_end: usize,
    escape_start: usize,
    dim: usize,
}

impl Layout {
    fn new(reactor: &ReactorConfig, n_gas: usize, n_surface: usize) -> Self {
        let mut h = Vec::new();
        let mut e = Vec::new();
        for z in 0..3 {
            let g = reactor.grid_points[z];
            for _ in 0..g {
                h.push(reactor.zone_lengths[z] / g as f64);
                e.push(reactor.voidage[z]);
            }
        }
        let cat_start = reactor.grid_points[0];
        let cat_end = cat_start + reactor.grid_points[1];
        let mut offset = Vec::with_capacity(h.len());
        let mut next = 0;
        for c in 0..h.len() {
            offset.push(next);
            next += n_gas + if (cat_start..cat_end).contains(&c) { n_surface } else { 0 };
        }
        Layout { h, e, offset, cat_start, cat_end, escape_start: next, dim: next + n_gas }
    }

    fn n_cells(&self) -> usize {
        self.h.len()
    }

    fn is_catalyst(&self, c: usize) -> bool {
        (self.cat_start..self.cat_end).contains(&c)
    }

    /// Conductance `1 / distance` between the centres of cells `c-1` and `c`.
    fn inv_dist(&self, c: usize) -> f64 {
        2.0 / (self.h[c - 1] + self.h[c])
    }
}

struct ReactorSystem<'a> {
    net: &'a ReactionNetwork,
    k: &'a [f64],
    area: f64,
    diff: Vec<f64>,
    layout: Layout,
    n_gas: usize,
    n_surface: usize,
}

impl ReactorSystem<'_> {
    /// Flux (+x direction, per area) through the face on the left of cell `c`;
    /// `c == n_cells` is the outlet face.
    fn face_flux(&self, y: &[f64], gas: usize, c: usize) -> f64 {
        let l = &self.layout;
        if c == 0 {
            0.0
        } else if c == l.n_cells() {
            let last = c - 1;
            self.diff[gas] * y[l.offset[last] + gas] * 2.0 / l.h[last]
        } else {
            -self.diff[gas] * (y[l.offset[c] + gas] - y[l.offset[c - 1] + gas]) * l.inv_dist(c)
        }
    }

    fn local_state(&self, y: &[f64], c: usize, buf: &mut [f64]) {
        let o = self.layout.offset[c];
        buf[..self.n_gas + self.n_surface].copy_from_slice(&y[o..o + self.n_gas + self.n_surface]);
    }
}

impl StiffSystem for ReactorSystem<'_> {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn bandwidths(&self) -> (usize, usize) {
        let w = self.n_gas + if self.layout.cat_end > self.layout.cat_start { self.n_surface } else { 0 };
        (w, w)
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let l = &self.layout;
        let nc = l.n_cells();
        for g in 0..self.n_gas {
            let mut left = 0.0;
            for c in 0..nc {
                let right = self.face_flux(y, g, c + 1);
                dy[l.offset[c] + g] = (left - right) / (l.e[c] * l.h[c]);
                left = right;
            }
            dy[l.escape_start + g] = self.area * left;
        }
        let n = self.n_gas + self.n_surface;
        let mut local = vec![0.0; n];
        let mut rates = vec![0.0; n];
        for c in l.cat_start..l.cat_end {
            self.local_state(y, c, &mut local);
            self.net.species_rates_into(&local, self.k, &mut rates);
            let o = l.offset[c];
            for g in 0..self.n_gas {
                dy[o + g] += rates[g] / l.e[c];
            }
            for s in self.n_gas..n {
                dy[o + s] = rates[s];
            }
        }
    }

    fn jacobian(&self, _t: f64, y: &[f64], jac: &mut BandMatrix) {
        let l = &self.layout;
        let nc = l.n_cells();
        for g in 0..self.n_gas {
            let d = self.diff[g];
            for c in 0..nc {
                let row = l.offset[c] + g;
                let cap = l.e[c] * l.h[c];
                if c > 0 {
                    let w = d * l.inv_dist(c) / cap;
                    jac.add(row, l.offset[c - 1] + g, w);
                    jac.add(row, row, -w);
                }
                if c + 1 < nc {
                    let w = d * l.inv_dist(c + 1) / cap;
                    jac.add(row, l.offset[c + 1] + g, w);
                    jac.add(row, row, -w);
                } else {
                    jac.add(row, row, -d * 2.0 / l.h[c] / cap);
                    jac.add(l.escape_start + g, row, self.area * d * 2.0 / l.h[c]);
                }
            }
        }
        let n = self.n_gas + self.n_surface;
        let mut local = vec![0.0; n];
        let mut dr = vec![0.0; n * n];
        for c in l.cat_start..l.cat_end {
            self.local_state(y, c, &mut local);
            self.net.species_rate_jacobian_into(&local, self.k, &mut dr);
            let o = l.offset[c];
            for i in 0..n {
                let scale = if i < self.n_gas { 1.0 / l.e[c] } else { 1.0 };
                for j in 0..n {
                    let v = dr[i * n + j];
                    if v != 0.0 {
                        jac.add(o + i, o + j, v * scale);
                    }
                }
            }
        }
    }
}

fn check_inputs(
    reactor: &ReactorConfig,
    net: &ReactionNetwork,
    k: &RateConstants,
    surface0: &[f64],
    pulse: &PulseSpec,
) -> Result<()> {
    reactor.validate()?;
    if k.len() != net.n_reactions() {
        return Err(Error::Dimension(format!("{} rate constants for {} reactions", k.len(), net.n_reactions())));
    }
    if surface0.len() != net.n_surface() {
        return Err(Error::Dimension(format!(
            "{} surface concentrations for {} adspecies",
            surface0.len(),
            net.n_surface()
        )));
    }
    if pulse.intensities.len() != net.n_gas() {
        return Err(Error::Dimension(format!(
            "{} pulse intensities for {} gas species",
            pulse.intensities.len(),
            net.n_gas()
        )));
    }
    if pulse.intensities.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidInput("pulse intensities must be finite and nonnegative".into()));
    }
    if let Some(w) = pulse.injection_width {
        if !(w > 0.0 && w <= reactor.zone_lengths[0]) {
            return Err(Error::InvalidInput(format!("injection width {w} outside (0, inert zone length]")));
        }
    }
    if net.n_surface() > 0 {
        let sites: f64 = surface0
            .iter()
            .zip(&net.site_counts()[net.n_gas()..])
            .map(|(c, &s)| c * s as f64)
            .sum();
        if surface0.iter().any(|&c| c < 0.0) || (sites - reactor.site_density).abs() > 1e-9 * reactor.site_density {
            return Err(Error::InvalidInput(format!(
                "initial surface holds {sites} nmol/cm³ of sites, expected {}",
                reactor.site_density
            )));
        }
    }
    Ok(())
}

/// Simulates one pulse starting from the surface state `surface0`.
pub fn simulate_pulse(
    reactor: &ReactorConfig,
    net: &ReactionNetwork,
    k: &RateConstants,
    surface0: &[f64],
    pulse: &PulseSpec,
) -> Result<PulseRecord> {
    check_inputs(reactor, net, k, surface0, pulse)?;
    let n_gas = net.n_gas();
    let n_surface = net.n_surface();
    let layout = Layout::new(reactor, n_gas, n_surface);
    let diff: Vec<f64> = net.species()[..n_gas]
        .iter()
        .map(|s| reactor.diffusivity(s.molar_mass.unwrap_or(reactor.ref_molar_mass)))
        .collect();

    let mut y0 = vec![0.0; layout.dim];
    let width = pulse.injection_width.unwrap_or(2.0 * layout.h[0]);
    let area = reactor.cross_section_area;
    let mut x_left = 0.0;
    for c in 0..layout.n_cells() {
        let x_right = x_left + layout.h[c];
        let overlap = (x_right.min(width) - x_left).max(0.0);
        if overlap > 0.0 {
            for g in 0..n_gas {
                let amount = pulse.intensities[g] * overlap / width;
                y0[layout.offset[c] + g] = amount / (area * layout.e[c] * layout.h[c]);
            }
        }
        if layout.is_catalyst(c) {
            let o = layout.offset[c] + n_gas;
            y0[o..o + n_surface].copy_from_slice(surface0);
        }
        x_left = x_right;
    }

    let sys = ReactorSystem { net, k: k.as_slice(), area, diff, layout, n_gas, n_surface };
    let times = reactor.output_times();
    let nt = times.len();
    let n = n_gas + n_surface;
    let l = &sys.layout;
    let n_cat = (l.cat_end - l.cat_start) as f64;
    let elements = net.element_matrix();

    let mut outlet_flux = vec![vec![0.0; nt]; n_gas];
    let mut thin = vec![vec![0.0; nt]; n];
    let mut flux_in = vec![vec![0.0; nt]; n_gas];
    let mut flux_out = vec![vec![0.0; nt]; n_gas];
    let mut inventory = vec![vec![0.0; nt]; elements.len()];

    let opts = StepOptions { rtol: reactor.rtol, atol: reactor.atol, ..Default::default() };
    let stats = integrate(&sys, &y0, &times, &opts, |ti, _t, y| {
        for g in 0..n_gas {
            outlet_flux[g][ti] = area * sys.face_flux(y, g, l.n_cells());
            flux_in[g][ti] = sys.face_flux(y, g, l.cat_start);
            flux_out[g][ti] = sys.face_flux(y, g, l.cat_end);
        }
        for i in 0..n {
            let sum: f64 = (l.cat_start..l.cat_end).map(|c| y[l.offset[c] + i]).sum();
            thin[i][ti] = sum / n_cat;
        }
        for (e, row) in elements.iter().enumerate() {
            let mut total = 0.0;
            for c in 0..l.n_cells() {
                let vol = area * l.h[c];
                for g in 0..n_gas {
                    total += row[g] * y[l.offset[c] + g] * vol * l.e[c];
                }
                if l.is_catalyst(c) {
                    for s in n_gas..n {
                        total += row[s] * y[l.offset[c] + s] * vol;
                    }
                }
            }
            for g in 0..n_gas {
                total += row[g] * y[l.escape_start + g];
            }
            inventory[e][ti] = total;
        }
    })?;
    log::debug!("pulse integrated in {} steps ({} rejected)", stats.accepted, stats.rejected);

    let surface_final: Vec<f64> = (n_gas..n).map(|i| thin[i][nt - 1]).collect();
    Ok(PulseRecord {
        species: net.species_names().iter().map(|s| s.to_string()).collect(),
        n_gas,
        times,
        intensities: pulse.intensities.clone(),
        outlet_flux,
        thin_zone_conc: thin,
        flux_in,
        flux_out,
        surface_initial: surface0.to_vec(),
        surface_final,
        element_inventory: inventory,
    })
}

/// Pulse train on a fresh (vacant) catalyst.
pub fn simulate_pulse_train(
    reactor: &ReactorConfig,
    net: &ReactionNetwork,
    k: &RateConstants,
    pulse: &PulseSpec,
    n_pulses: usize,
) -> Result<Vec<PulseRecord>> {
    simulate_pulse_train_from(reactor, net, k, &clean_surface(net, reactor), pulse, n_pulses)
}

/// Each pulse starts from the previous pulse's final surface state with the
/// gas phase evacuated.
pub fn simulate_pulse_train_from(
    reactor: &ReactorConfig,
    net: &ReactionNetwork,
    k: &RateConstants,
    surface0: &[f64],
    pulse: &PulseSpec,
    n_pulses: usize,
) -> Result<Vec<PulseRecord>> {
    if n_pulses == 0 {
        return Err(Error::InvalidInput("a pulse train needs at least one pulse".into()));
    }
    let mut records: Vec<PulseRecord> = Vec::with_capacity(n_pulses);
    let mut surface = surface0.to_vec();
    for p in 0..n_pulses {
        let rec = simulate_pulse(reactor, net, k, &surface, pulse)?;
        log::info!("simulated pulse {p}");
        surface = rec.surface_final.clone();
        records.push(rec);
    }
    Ok(records)
}

fn csv_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::artifact(path, e.to_string())
}

fn write_rows(path: &Path, header: &[String], columns: &[&Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    let n = columns.first().map_or(0, |c| c.len());
    for t in 0..n {
        w.write_record(columns.iter().map(|c| format!("{}", c[t]))).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| csv_error(path, e))?;
    Ok(())
}

fn read_rows(path: &Path, header: &[String]) -> Result<Vec<Vec<f64>>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let found: Vec<String> = r.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect();
    if found != header {
        return Err(csv_error(path, format!("expected columns {header:?}, found {found:?}")));
    }
    let mut columns = vec![Vec::new(); header.len()];
    for row in r.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        for (c, v) in columns.iter_mut().zip(row.iter()) {
            c.push(v.parse::<f64>().map_err(|e| csv_error(path, format!("bad number {v:?}: {e}")))?);
        }
    }
    Ok(columns)
}

impl PulseRecord {
    fn outlet_header(&self) -> Vec<String> {
        std::iter::once("t".to_string())
            .chain(self.species[..self.n_gas].iter().map(|g| format!("flux_{g}")))
            .collect()
    }

    fn thin_zone_header(&self) -> Vec<String> {
        let gases = &self.species[..self.n_gas];
        std::iter::once("t".to_string())
            .chain(self.species.iter().map(|s| format!("c_{s}")))
            .chain(gases.iter().map(|g| format!("f_in_{g}")))
            .chain(gases.iter().map(|g| format!("f_out_{g}")))
            .collect()
    }

    /// Writes `pulse_<p>_outlet.csv` (nmol/s) and `pulse_<p>_thinzone.csv`
    /// (nmol/cm³ and nmol/(cm² s)) into `dir`.
    pub fn write_csv(&self, dir: &Path, pulse: usize) -> Result<()> {
        let mut cols: Vec<&Vec<f64>> = vec![&self.times];
        cols.extend(self.outlet_flux.iter());
        write_rows(&dir.join(format!("pulse_{pulse}_outlet.csv")), &self.outlet_header(), &cols)?;
        let mut cols: Vec<&Vec<f64>> = vec![&self.times];
        cols.extend(self.thin_zone_conc.iter().chain(&self.flux_in).chain(&self.flux_out));
        write_rows(&dir.join(format!("pulse_{pulse}_thinzone.csv")), &self.thin_zone_header(), &cols)
    }

    /// Reads the files written by [`write_csv`](Self::write_csv). The element
    /// inventory is not stored and comes back empty.
    pub fn read_csv(dir: &Path, pulse: usize, net: &ReactionNetwork, intensities: &[f64]) -> Result<Self> {
        let n = net.n_species();
        let n_gas = net.n_gas();
        let mut rec = PulseRecord {
            species: net.species_names().iter().map(|s| s.to_string()).collect(),
            n_gas,
            times: Vec::new(),
            intensities: intensities.to_vec(),
            outlet_flux: Vec::new(),
            thin_zone_conc: Vec::new(),
            flux_in: Vec::new(),
            flux_out: Vec::new(),
            surface_initial: Vec::new(),
            surface_final: Vec::new(),
            element_inventory: Vec::new(),
        };
        let path = dir.join(format!("pulse_{pulse}_outlet.csv"));
        let mut outlet = read_rows(&path, &rec.outlet_header())?;
        let path = dir.join(format!("pulse_{pulse}_thinzone.csv"));
        let mut zone = read_rows(&path, &rec.thin_zone_header())?;
        if zone[0] != outlet[0] {
            return Err(csv_error(&path, "time grid differs from the outlet file"));
        }
        if zone[0].is_empty() {
            return Err(csv_error(&path, "no rows"));
        }
        rec.times = std::mem::take(&mut zone[0]);
        rec.outlet_flux = outlet.drain(1..).collect();
        rec.flux_out = zone.drain(1 + n + n_gas..).collect();
        rec.flux_in = zone.drain(1 + n..).collect();
        rec.thin_zone_conc = zone.drain(1..).collect();
        rec.surface_initial = rec.surface_at(0);
        rec.surface_final = rec.surface_at(rec.times.len() - 1);
        Ok(rec)
    }
}

/// Dimensionless exit flow of a non-reactive gas from a single uniform zone
/// with a reflecting inlet and an absorbing outlet, as a function of
/// `τ = t D / (e L²)`. Normalised so that its integral over τ is one.
pub fn standard_diffusion_curve(tau: f64) -> f64 {
    if tau <= 0.0 {
        return 0.0;
    }
    let pi = std::f64::consts::PI;
    let mut sum = 0.0;
    if tau < 0.1 {
        // method-of-images form, fast for small τ
        let pre = 1.0 / (pi * tau.powi(3)).sqrt();
        for n in 0..1000 {
            let m = (2 * n + 1) as f64;
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            let term = pre * sign * m * (-m * m / (4.0 * tau)).exp();
            sum += term;
            if term.abs() < 1e-14 {
                break;
            }
        }
    } else {
        // eigenfunction expansion
        for n in 0..100_000 {
            let m = n as f64 + 0.5;
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            let term = pi * sign * (2 * n + 1) as f64 * (-m * m * pi * pi * tau).exp();
            sum += term;
            if term.abs() < 1e-14 {
                break;
            }
        }
    }
    sum
}

/// [`standard_diffusion_curve`] over a grid.
pub fn inert_reference_curve(tau: &[f64]) -> Vec<f64> {
    tau.iter().map(|&t| standard_diffusion_curve(t)).collect()
}

/// `(τ, F̄)` for gas `gas` of a record, using the inert-zone voidage and the
/// species diffusivity over the whole reactor length.
pub fn dimensionless_outlet(
    record: &PulseRecord,
    reactor: &ReactorConfig,
    net: &ReactionNetwork,
    gas: usize,
) -> (Vec<f64>, Vec<f64>) {
    let sp = &net.species()[gas];
    debug_assert_eq!(sp.phase, Phase::Gas);
    let d = reactor.diffusivity(sp.molar_mass.unwrap_or(reactor.ref_molar_mass));
    let e = reactor.voidage[0];
    let len = reactor.total_length();
    let tscale = d / (e * len * len);
    let fscale = e * len * len / (record.intensities[gas] * d);
    let tau = record.times.iter().map(|t| t * tscale).collect();
    let flow = record.outlet_flux[gas].iter().map(|f| f * fscale).collect();
    (tau, flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trapezoid(t: &[f64], f: &[f64]) -> f64 {
        t.windows(2).zip(f.windows(2)).map(|(t, f)| 0.5 * (t[1] - t[0]) * (f[0] + f[1])).sum()
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
    }

    #[test]
    fn reference_curve_peak_and_normalisation() {
        let tau: Vec<f64> = (1..=200_000).map(|i| i as f64 * 1e-4).collect();
        let f = inert_reference_curve(&tau);
        let i = argmax(&f);
        assert!((tau[i] - 1.0 / 6.0).abs() < 2e-4, "peak at {}", tau[i]);
        assert!((f[i] - 1.85).abs() < 0.005, "height {}", f[i]);
        let area = trapezoid(&tau, &f);
        assert!((area - 1.0).abs() < 1e-6, "area {area}");
        assert_eq!(standard_diffusion_curve(0.0), 0.0);
        assert!(standard_diffusion_curve(1e-3) < 1e-50);
    }

    #[test]
    fn reference_series_forms_agree() {
        // both expansions are exact; compare them where either converges quickly
        let pi = std::f64::consts::PI;
        for &tau in &[0.05, 0.08, 0.099, 0.12, 0.3] {
            let eig: f64 = (0..2000)
                .map(|n| {
                    let m = n as f64 + 0.5;
                    pi * (-1f64).powi(n) * (2 * n + 1) as f64 * (-m * m * pi * pi * tau).exp()
                })
                .sum();
            let img: f64 = (0..50)
                .map(|n| {
                    let m = (2 * n + 1) as f64;
                    (-1f64).powi(n) * m * (-m * m / (4.0 * tau)).exp() / (pi * tau.powi(3)).sqrt()
                })
                .sum();
            assert!((eig - img).abs() < 1e-10, "tau {tau}: {eig} vs {img}");
            assert!((standard_diffusion_curve(tau) - eig).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_unbalanced_surface() {
        let r = ReactorConfig::default();
        let net = ReactionNetwork::co_oxidation();
        let pulse = PulseSpec { intensities: vec![1.0, 1.0, 0.0], injection_width: None };
        let err = simulate_pulse(&r, &net, &RateConstants::co_oxidation_reference(), &[0.0, 0.0, 10.0], &pulse);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rejects_invalid_geometry() {
        let r = ReactorConfig { voidage: [0.4, 1.2, 0.4], ..Default::default() };
        assert!(matches!(r.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn inert_pulse_escapes_completely() {
        let r = ReactorConfig::default();
        let net = ReactionNetwork::inert("Ar", 40.0);
        let pulse = PulseSpec { intensities: vec![1.0], injection_width: None };
        let rec = simulate_pulse(&r, &net, &RateConstants::zeros(0), &[], &pulse).unwrap();
        let m0 = trapezoid(&rec.times, &rec.outlet_flux[0]);
        assert!((m0 - 1.0).abs() < 5e-3, "m0 = {m0}");
        assert!(rec.outlet_flux[0].iter().all(|&f| f >= -1e-9));
    }

    #[test]
    fn carryover_is_bitwise() {
        let r = ReactorConfig { time_horizon: 0.2, ..Default::default() };
        let net = ReactionNetwork::co_oxidation();
        let pulse = PulseSpec { intensities: vec![1.0, 1.0, 0.0], injection_width: None };
        let recs =
            simulate_pulse_train(&r, &net, &RateConstants::co_oxidation_reference(), &pulse, 3).unwrap();
        for p in 1..3 {
            assert_eq!(recs[p].surface_initial, recs[p - 1].surface_final);
        }
        let single = simulate_pulse(
            &r,
            &net,
            &RateConstants::co_oxidation_reference(),
            &clean_surface(&net, &r),
            &pulse,
        )
        .unwrap();
        assert_eq!(single, recs[0]);
    }
}
