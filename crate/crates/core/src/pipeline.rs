//! Stage orchestration: simulate, preprocess, fit, evaluate and baseline,
//! each writing its artifacts and a manifest into its own directory under
//! the run root, plus the comparison of finished reports.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::{fit_baseline, BaselineResult, ParamStatus};
use crate::config::{sha256_hex, RunConfig, StageName};
use crate::data_pipeline::{build_dataset, observe_pulses, NoiseSpec, PulseDataset, PulseSamples, ThinZone};
use crate::error::{Error, Result};
use crate::evaluation::{energy_scale_mae, ln_ratios, parameter_std, parity_metrics, rebuild_ode, Parity};
use crate::kinn::{train, KinnModel, KinnParameters, Schedule, TrainOutcome};
use crate::reaction_model::ReactionNetwork;
use crate::reactor_sim::{simulate_pulse_train, PulseRecord};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.toml";
pub const FIT_REPORT: &str = "fit_report";
pub const EVALUATION_REPORT: &str = "evaluation_report";
pub const BASELINE_REPORT: &str = "baseline_report";
/// Fitted constants at or below this value are reported at the bound.
pub const KINN_ZERO: f64 = 1e-9;
pub const SIGMA_LABEL: &str = "sensitivity proxy (inverse-Hessian, not a rigorous error estimate)";

/// Directory layout of one run.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn stage_dir(&self, stage: StageName) -> PathBuf {
        match stage {
            StageName::Preprocess => self.root.join("dataset"),
            other => self.root.join(other.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub noise: u64,
    pub init: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: StageName,
    pub tool_version: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upstream_manifest_sha256: Option<String>,
    pub seeds: Seeds,
    pub species: Vec<String>,
    pub units: BTreeMap<String, String>,
    /// File name to SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

fn units() -> BTreeMap<String, String> {
    [
        ("time", "s"),
        ("concentration", "nmol/cm3"),
        ("outlet_flux", "nmol/s"),
        ("face_flux", "nmol/(cm2 s)"),
        ("net_flux", "nmol/(cm3 s)"),
        ("uptake", "nmol/cm3"),
        ("length", "cm"),
        ("temperature", "K"),
        ("energy", "eV"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

fn file_sha(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    Ok(sha256_hex(&fs::read(path)?))
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<(Self, String)> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let bytes = fs::read(&path)?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| Error::artifact(&path, e.to_string()))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::artifact(&path, e.message().to_string()))?;
        Ok((m, sha256_hex(&bytes)))
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Numerical(format!("serialising manifest: {e}")))?;
        fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }
}

fn write_manifest(
    cfg: &RunConfig,
    layout: &RunLayout,
    stage: StageName,
    net: &ReactionNetwork,
    upstream: Option<String>,
    files: &[String],
) -> Result<()> {
    let dir = layout.stage_dir(stage);
    let files = files.iter().map(|f| Ok((f.clone(), file_sha(&dir.join(f))?))).collect::<Result<_>>()?;
    Manifest {
        stage,
        tool_version: TOOL_VERSION.to_string(),
        config_hash: cfg.stage_hash(stage),
        upstream_manifest_sha256: upstream,
        seeds: Seeds { noise: cfg.dataset.noise_seed, init: cfg.kinn.schedule.seed },
        species: net.species_names().iter().map(|s| s.to_string()).collect(),
        units: units(),
        files,
    }
    .write(&dir)
}

/// Confirms that the upstream artifacts of `stage` exist, were produced by
/// this configuration and are unmodified. Returns the upstream manifest hash.
pub fn check_upstream(cfg: &RunConfig, layout: &RunLayout, stage: StageName) -> Result<Option<String>> {
    let Some(up) = stage.upstream() else { return Ok(None) };
    let dir = layout.stage_dir(up);
    let (m, sha) = Manifest::read(&dir)?;
    let path = dir.join(MANIFEST);
    if m.stage != up {
        return Err(Error::artifact(&path, format!("expected a {up} manifest, found {}", m.stage)));
    }
    if m.tool_version != TOOL_VERSION {
        return Err(Error::artifact(&path, format!("written by version {}, this is {TOOL_VERSION}", m.tool_version)));
    }
    if m.config_hash != cfg.stage_hash(up) {
        return Err(Error::artifact(&path, format!("{up} artifacts come from a different configuration; rerun {up}")));
    }
    for (name, expected) in &m.files {
        if &file_sha(&dir.join(name))? != expected {
            return Err(Error::artifact(dir.join(name), "contents changed since the manifest was written"));
        }
    }
    Ok(Some(sha))
}

/// Ordered `key = value` report.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvReport {
    pub entries: Vec<(String, String)>,
}

impl KvReport {
    pub fn push(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut r = KvReport::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            r.push(k.trim(), v.trim());
        }
        Ok(r)
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        Self::parse(&fs::read_to_string(path)?).map_err(|m| Error::artifact(path, m))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::artifact(path, e.to_string()))
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the resolved configuration into the run root.
pub fn write_config(cfg: &RunConfig, layout: &RunLayout) -> Result<()> {
    fs::create_dir_all(&layout.root)?;
    fs::write(layout.root.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

pub fn simulate(cfg: &RunConfig, layout: &RunLayout) -> Result<Vec<PulseRecord>> {
    let net = cfg.network()?;
    let k = cfg.rate_constants(&net)?;
    let records = simulate_pulse_train(&cfg.reactor, &net, &k, &cfg.pulse.spec(), cfg.pulse.n_pulses)?;
    let dir = layout.stage_dir(StageName::Simulate);
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for (p, rec) in records.iter().enumerate() {
        rec.write_csv(&dir, p)?;
        files.push(format!("pulse_{p}_outlet.csv"));
        files.push(format!("pulse_{p}_thinzone.csv"));
    }
    write_manifest(cfg, layout, StageName::Simulate, &net, None, &files)?;
    Ok(records)
}

fn read_records(cfg: &RunConfig, layout: &RunLayout, net: &ReactionNetwork) -> Result<Vec<PulseRecord>> {
    let dir = layout.stage_dir(StageName::Simulate);
    (0..cfg.pulse.n_pulses).map(|p| PulseRecord::read_csv(&dir, p, net, &cfg.pulse.intensities)).collect()
}

fn noise_spec(cfg: &RunConfig) -> NoiseSpec {
    NoiseSpec { level: cfg.dataset.noise_level, seed: cfg.dataset.noise_seed, target: cfg.dataset.noise_target }
}

pub fn preprocess(cfg: &RunConfig, layout: &RunLayout) -> Result<PulseDataset> {
    let upstream = check_upstream(cfg, layout, StageName::Preprocess)?;
    let net = cfg.network()?;
    let records = read_records(cfg, layout, &net)?;
    let d = &cfg.dataset;
    let zone = ThinZone::from_reactor(&cfg.reactor);
    let ds =
        build_dataset(&records, &net, &zone, d.mode, &noise_spec(cfg), &d.sampling, &d.train_pulses, &d.test_pulses)?;
    let dir = layout.stage_dir(StageName::Preprocess);
    ds.write_dir(&dir)?;
    let files = ["train.csv", "test.csv", "scaling.csv", "dataset.toml"].map(String::from);
    write_manifest(cfg, layout, StageName::Preprocess, &net, upstream, &files)?;
    Ok(ds)
}

/// Pooled parity of scaled concentrations (observed species) and of the
/// network derivative against the fitted kinetics (all species).
#[derive(Debug, Clone, PartialEq)]
pub struct FitMetrics {
    pub conc: Parity,
    pub rate: Parity,
    pub conc_by_species: Vec<Option<Parity>>,
}

pub fn fit_metrics(model: &KinnModel, theta: &[f64], samples: &[PulseSamples]) -> Result<Option<FitMetrics>> {
    if samples.iter().all(|s| s.is_empty()) {
        return Ok(None);
    }
    let n = model.net.n_species();
    let mut pred = vec![Vec::new(); n];
    let mut target = vec![Vec::new(); n];
    for p in samples {
        let traj = model.predict_pulse(theta, &p.moments, &p.times)?;
        for i in (0..n).filter(|&i| model.observed[i]) {
            pred[i].extend(traj.conc[i].iter().map(|c| c / model.scaling.species[i]));
            target[i].extend_from_slice(&p.targets[i]);
        }
    }
    let (lhs, rhs) = model.rate_parity(theta, samples)?;
    let conc = parity_metrics(&pred.concat(), &target.concat())?;
    let rate = parity_metrics(&lhs.concat(), &rhs.concat())?;
    let conc_by_species = (0..n)
        .map(|i| if model.observed[i] { parity_metrics(&pred[i], &target[i]).map(Some) } else { Ok(None) })
        .collect::<Result<_>>()?;
    Ok(Some(FitMetrics { conc, rate, conc_by_species }))
}

fn push_metrics(r: &mut KvReport, set: &str, m: &Option<FitMetrics>) {
    match m {
        Some(m) => {
            r.push(format!("{set}_conc_mae"), m.conc.mae);
            r.push(format!("{set}_conc_r2"), fmt_opt(m.conc.r2));
            r.push(format!("{set}_rate_mae"), m.rate.mae);
            r.push(format!("{set}_rate_r2"), fmt_opt(m.rate.r2));
        }
        None => {
            for key in ["conc_mae", "conc_r2", "rate_mae", "rate_r2"] {
                r.push(format!("{set}_{key}"), "undefined");
            }
        }
    }
}

fn schedule_echo(s: &Schedule) -> String {
    s.stages.iter().map(|st| format!("{:e}:{}:{}", st.alpha, st.beta, st.epochs)).collect::<Vec<_>>().join(";")
}

fn push_header(r: &mut KvReport, method: &str, cfg: &RunConfig, net: &ReactionNetwork) {
    r.push("method", method);
    r.push("run", &cfg.name);
    r.push("network", net.name());
    r.push("mode", cfg.dataset.mode);
    r.push("noise_level", cfg.dataset.noise_level);
    r.push("noise_seed", cfg.dataset.noise_seed);
}

fn push_constants(r: &mut KvReport, net: &ReactionNetwork, k: &[f64], k_true: &[f64], status: &[ParamStatus]) {
    for (j, rx) in net.reactions().iter().enumerate() {
        r.push(format!("k_{}", rx.label), k[j]);
        r.push(format!("units_{}", rx.label), &rx.units);
        r.push(format!("k_true_{}", rx.label), k_true[j]);
        r.push(format!("status_{}", rx.label), status[j]);
    }
    let ln = ln_ratios(k, k_true);
    for (rx, v) in net.reactions().iter().zip(&ln) {
        r.push(format!("ln_ratio_{}", rx.label), fmt_opt(*v));
    }
    let defined: Vec<f64> = ln.iter().flatten().map(|v| v.abs()).collect();
    let mean = if defined.is_empty() { None } else { Some(defined.iter().sum::<f64>() / defined.len() as f64) };
    r.push("mean_abs_ln", fmt_opt(mean));
    let undefined: Vec<&str> =
        net.reactions().iter().zip(&ln).filter(|(_, v)| v.is_none()).map(|(rx, _)| rx.label.as_str()).collect();
    r.push("ln_undefined", if undefined.is_empty() { "none".to_string() } else { undefined.join(",") });
}

pub fn kinn_status(k: f64) -> ParamStatus {
    if k.is_finite() && k > KINN_ZERO {
        ParamStatus::Converged
    } else {
        ParamStatus::AtBound
    }
}

fn load_model<'a>(cfg: &RunConfig, net: &'a ReactionNetwork, ds: &PulseDataset) -> Result<KinnModel<'a>> {
    let mut model = KinnModel::new(cfg.kinn.layers.clone(), net, &ds.meta)?;
    model.site_balance = cfg.kinn.site_balance;
    Ok(model)
}

pub fn fit(cfg: &RunConfig, layout: &RunLayout) -> Result<TrainOutcome> {
    let upstream = check_upstream(cfg, layout, StageName::Fit)?;
    let net = cfg.network()?;
    let k_true = cfg.rate_constants(&net)?;
    let ds = PulseDataset::read_dir(&layout.stage_dir(StageName::Preprocess))?;
    let model = load_model(cfg, &net, &ds)?;
    let schedule = &cfg.kinn.schedule;
    let out = train(&model, &ds.train, schedule)?;
    let dir = layout.stage_dir(StageName::Fit);
    fs::create_dir_all(&dir)?;
    out.params.write(&dir.join("params.txt"))?;

    let labels = net.reaction_labels();
    let mut header: Vec<String> =
        ["stage", "iteration", "alpha", "beta", "j_data", "j_model", "j_uptake", "J"].map(String::from).to_vec();
    header.extend(labels.iter().map(|l| format!("k_{l}")));
    let rows: Vec<Vec<String>> = out
        .trajectory
        .iter()
        .map(|rec| {
            let t = &rec.terms;
            let mut row = vec![rec.stage.to_string(), rec.iteration.to_string()];
            row.extend([rec.alpha, rec.beta, t.j_data, t.j_model, t.j_uptake, t.total].map(|v| format!("{v}")));
            row.extend(rec.k.iter().map(|v| format!("{v}")));
            row
        })
        .collect();
    write_table(&dir.join("trajectory.csv"), &header, &rows)?;

    let theta = out.params.flat();
    let k = out.params.rate_constants();
    let status: Vec<ParamStatus> = k.iter().map(|&v| kinn_status(v)).collect();
    let mut r = KvReport::default();
    push_header(&mut r, "kinn", cfg, &net);
    r.push("seed", schedule.seed);
    r.push("layers", cfg.kinn.layers.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","));
    r.push("n_parameters", model.n_params());
    r.push("site_balance", cfg.kinn.site_balance);
    r.push("alpha", out.alpha);
    r.push("beta", out.beta);
    r.push("j_data", out.final_terms.j_data);
    r.push("j_model", out.final_terms.j_model);
    r.push("j_uptake", out.final_terms.j_uptake);
    r.push("J", out.final_terms.total);
    push_constants(&mut r, &net, &k, k_true.as_slice(), &status);
    push_metrics(&mut r, "train", &fit_metrics(&model, &theta, &ds.train)?);
    push_metrics(&mut r, "test", &fit_metrics(&model, &theta, &ds.test)?);
    r.push("schedule_stages", schedule_echo(schedule));
    r.push("iterations_per_epoch", schedule.iterations_per_epoch);
    r.push("step_size", schedule.step_size);
    r.push("init_scale_weights", schedule.init_scale_weights);
    r.push("init_scale_kinetic", schedule.init_scale_kinetic);
    r.push("trajectory", "trajectory.csv");
    r.push("wall_time_s", format!("{:.3}", out.wall_time.as_secs_f64()));
    r.write(&dir.join(FIT_REPORT))?;

    let files = ["params.txt", "trajectory.csv", FIT_REPORT].map(String::from);
    write_manifest(cfg, layout, StageName::Fit, &net, upstream, &files)?;
    Ok(out)
}

/// Largest pointwise gap between two curves relative to the peak of `reference`.
fn relative_gap(curve: &[f64], reference: &[f64]) -> f64 {
    let peak = reference.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return 0.0;
    }
    curve.iter().zip(reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / peak
}

pub fn evaluate(cfg: &RunConfig, layout: &RunLayout) -> Result<KvReport> {
    let upstream = check_upstream(cfg, layout, StageName::Evaluate)?;
    let net = cfg.network()?;
    let k_true = cfg.rate_constants(&net)?;
    let fit_dir = layout.stage_dir(StageName::Fit);
    let params = KinnParameters::read(&fit_dir.join("params.txt"))?;
    let ds = PulseDataset::read_dir(&layout.stage_dir(StageName::Preprocess))?;
    let model = load_model(cfg, &net, &ds)?;
    if params.layer_sizes != cfg.kinn.layers {
        return Err(Error::artifact(fit_dir.join("params.txt"), "layer sizes differ from the configuration"));
    }
    let theta = params.flat();
    let k = params.rate_constants();
    let records = read_records(cfg, layout, &net)?;
    let zone = ds.meta.zone;
    let obs = observe_pulses(&records, &net, &zone, ds.meta.mode, &ds.meta.noise)?;
    let dir = layout.stage_dir(StageName::Evaluate);
    fs::create_dir_all(&dir)?;
    let names = net.species_names();
    let n = net.n_species();
    let n_gas = net.n_gas();

    // parity.csv
    let header: Vec<String> =
        ["set", "pulse", "t", "species", "quantity", "target", "predicted"].map(String::from).to_vec();
    let mut rows = Vec::new();
    let mut per_species = KvReport::default();
    for (set, samples) in [("train", &ds.train), ("test", &ds.test)] {
        let (lhs, rhs) = model.rate_parity(&theta, samples)?;
        let mut offset = 0;
        let mut sp_pred = vec![Vec::new(); n];
        let mut sp_target = vec![Vec::new(); n];
        for p in samples.iter() {
            let traj = model.predict_pulse(&theta, &p.moments, &p.times)?;
            for i in 0..n {
                for j in 0..p.len() {
                    let t = format!("{}", p.times[j]);
                    if model.observed[i] {
                        let pred = traj.conc[i][j] / model.scaling.species[i];
                        sp_pred[i].push(pred);
                        sp_target[i].push(p.targets[i][j]);
                        rows.push(vec![
                            set.into(),
                            p.pulse.to_string(),
                            t.clone(),
                            names[i].into(),
                            "concentration".into(),
                            format!("{}", p.targets[i][j]),
                            format!("{pred}"),
                        ]);
                    }
                    rows.push(vec![
                        set.into(),
                        p.pulse.to_string(),
                        t,
                        names[i].into(),
                        "rate".into(),
                        format!("{}", rhs[i][offset + j]),
                        format!("{}", lhs[i][offset + j]),
                    ]);
                }
            }
            offset += p.len();
        }
        for i in (0..n).filter(|&i| !sp_pred[i].is_empty()) {
            let m = parity_metrics(&sp_pred[i], &sp_target[i])?;
            per_species.push(format!("{set}_conc_mae_{}", names[i]), m.mae);
            per_species.push(format!("{set}_conc_r2_{}", names[i]), fmt_opt(m.r2));
        }
    }
    write_table(&dir.join("parity.csv"), &header, &rows)?;

    // rebuild.csv
    let mut header: Vec<String> = vec!["pulse".into(), "t".into()];
    for s in &names {
        for kind in ["data", "kinn", "ode_fit", "ode_true"] {
            header.push(format!("{kind}_{s}"));
        }
    }
    let mut rows = Vec::new();
    let mut gap_fit = vec![0.0_f64; n_gas];
    let mut gap_true = vec![0.0_f64; n_gas];
    for p in ds.train.iter().chain(&ds.test) {
        let rec = &records[p.pulse];
        let mut grid = vec![0.0];
        grid.extend_from_slice(&p.times);
        let c0: Vec<f64> = (0..n).map(|i| rec.thin_zone_conc[i][0]).collect();
        let g = &obs[p.pulse].net_flux;
        let ode_fit = rebuild_ode(&k, &net, &rec.times, g, &c0, zone.voidage, &grid)?;
        let ode_true = rebuild_ode(k_true.as_slice(), &net, &rec.times, g, &c0, zone.voidage, &grid)?;
        let traj = model.predict_pulse(&theta, &p.moments, &p.times)?;
        let data: Vec<Vec<f64>> = (0..n)
            .map(|i| grid.iter().map(|&t| crate::numeric::interp_linear(&rec.times, &rec.thin_zone_conc[i], t)).collect())
            .collect();
        for i in 0..n_gas {
            gap_fit[i] = gap_fit[i].max(relative_gap(&ode_fit[i], &ode_true[i]));
            gap_true[i] = gap_true[i].max(relative_gap(&ode_true[i], &data[i]));
        }
        for (j, &t) in grid.iter().enumerate() {
            let mut row = vec![p.pulse.to_string(), format!("{t}")];
            for i in 0..n {
                let kinn = if j == 0 { String::new() } else { format!("{}", traj.conc[i][j - 1]) };
                row.extend([format!("{}", data[i][j]), kinn, format!("{}", ode_fit[i][j]), format!("{}", ode_true[i][j])]);
            }
            rows.push(row);
        }
    }
    write_table(&dir.join("rebuild.csv"), &header, &rows)?;

    // uncertainty
    let (alpha, beta) = cfg.kinn.schedule.final_weights();
    let unc = parameter_std(&model, &theta, &ds.train, alpha, beta)?;
    let labels = net.reaction_labels();
    let header: Vec<String> = ["reaction", "k", "sigma", "relative_sigma"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = labels
        .iter()
        .enumerate()
        .map(|(j, l)| vec![l.to_string(), format!("{}", unc.k[j]), format!("{}", unc.sigma[j]), fmt_opt(unc.relative_sigma[j])])
        .collect();
    write_table(&dir.join("uncertainty.csv"), &header, &rows)?;

    let energy = energy_scale_mae(&k, k_true.as_slice(), cfg.evaluation.temperature);
    let mut r = KvReport::default();
    push_header(&mut r, "kinn", cfg, &net);
    push_constants(&mut r, &net, &k, k_true.as_slice(), &k.iter().map(|&v| kinn_status(v)).collect::<Vec<_>>());
    r.push("temperature_K", cfg.evaluation.temperature);
    match energy {
        Ok(e) => r.push("energy_mae_eV", e.mae_ev),
        Err(_) => r.push("energy_mae_eV", "undefined"),
    }
    for (i, s) in names.iter().take(n_gas).enumerate() {
        r.push(format!("rebuild_gap_fit_vs_true_{s}"), gap_fit[i]);
        r.push(format!("rebuild_gap_true_vs_data_{s}"), gap_true[i]);
    }
    r.entries.extend(per_species.entries);
    r.push("sigma_kind", SIGMA_LABEL);
    for (j, l) in labels.iter().enumerate() {
        r.push(format!("sigma_{l}"), unc.sigma[j]);
        r.push(format!("relative_sigma_{l}"), fmt_opt(unc.relative_sigma[j]));
    }
    r.push("sigma_most_certain", unc.most_certain().map_or("undefined", |j| labels[j]));
    r.push("hessian_alpha", unc.alpha);
    r.push("hessian_beta", unc.beta);
    r.push("hessian_condition", unc.condition_number);
    r.push("hessian_regularized", unc.regularized);
    r.push("hessian_ridge", unc.ridge);
    r.write(&dir.join(EVALUATION_REPORT))?;

    let files = ["parity.csv", "rebuild.csv", "uncertainty.csv", EVALUATION_REPORT].map(String::from);
    write_manifest(cfg, layout, StageName::Evaluate, &net, upstream, &files)?;
    Ok(r)
}

pub fn baseline(cfg: &RunConfig, layout: &RunLayout) -> Result<BaselineResult> {
    let upstream = check_upstream(cfg, layout, StageName::Baseline)?;
    let net = cfg.network()?;
    let k_true = cfg.rate_constants(&net)?;
    let ds = PulseDataset::read_dir(&layout.stage_dir(StageName::Preprocess))?;
    let records = read_records(cfg, layout, &net)?;
    let zone = ds.meta.zone;
    let obs = observe_pulses(&records, &net, &zone, ds.meta.mode, &ds.meta.noise)?;
    let train: Vec<_> = ds.train.iter().map(|p| obs[p.pulse].clone()).collect();
    let smoothing = cfg.baseline.smoothing;
    let res = fit_baseline(&train, &net, &zone, ds.meta.mode, smoothing)?;
    let dir = layout.stage_dir(StageName::Baseline);
    fs::create_dir_all(&dir)?;
    let mut r = KvReport::default();
    push_header(&mut r, "baseline", cfg, &net);
    r.push("smoothing", smoothing);
    push_constants(&mut r, &net, &res.k, k_true.as_slice(), &res.status);
    r.push("residual_norm", res.residual_norm);
    r.push("condition_number", res.condition_number);
    r.push("rows", res.rows);
    r.push("train_pulses", ds.train.iter().map(|p| p.pulse.to_string()).collect::<Vec<_>>().join(","));
    r.write(&dir.join(BASELINE_REPORT))?;
    write_manifest(cfg, layout, StageName::Baseline, &net, upstream, &[BASELINE_REPORT.to_string()])?;
    Ok(res)
}

pub fn run_stage(cfg: &RunConfig, layout: &RunLayout, stage: StageName) -> Result<()> {
    log::info!("{}: {stage}", layout.root.display());
    match stage {
        StageName::Simulate => simulate(cfg, layout).map(drop),
        StageName::Preprocess => preprocess(cfg, layout).map(drop),
        StageName::Fit => fit(cfg, layout).map(drop),
        StageName::Evaluate => evaluate(cfg, layout).map(drop),
        StageName::Baseline => baseline(cfg, layout).map(drop),
    }
}

/// Runs the requested stages in pipeline order. A configuration with a
/// noise sweep runs each level in `noise_<level>/` and then compares every
/// fit and baseline report.
pub fn run_pipeline(cfg: &RunConfig, root: &Path, stages: &[StageName]) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut order = stages.to_vec();
    order.sort();
    order.dedup();
    let Some(sweep) = &cfg.sweep else {
        let layout = RunLayout::new(root);
        write_config(cfg, &layout)?;
        for &s in &order {
            run_stage(cfg, &layout, s)?;
        }
        return Ok(vec![root.to_path_buf()]);
    };
    let mut roots = Vec::new();
    let mut reports = Vec::new();
    for &level in &sweep.noise_levels {
        let mut sub = cfg.clone();
        sub.sweep = None;
        sub.dataset.noise_level = level;
        sub.name = format!("{}-noise-{level}", cfg.name);
        let dir = root.join(format!("noise_{level}"));
        let layout = RunLayout::new(&dir);
        write_config(&sub, &layout)?;
        for &s in &order {
            run_stage(&sub, &layout, s)?;
        }
        for (stage, file) in [(StageName::Fit, FIT_REPORT), (StageName::Baseline, BASELINE_REPORT)] {
            let p = layout.stage_dir(stage).join(file);
            if p.exists() {
                reports.push(p);
            }
        }
        roots.push(dir);
    }
    if reports.len() >= 2 {
        let table = compare_runs(&reports)?;
        table.write(root)?;
    }
    Ok(roots)
}

/// One row per report of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub source: String,
    pub method: String,
    pub noise_level: f64,
    pub k: Vec<f64>,
    pub ln_ratio: Vec<Option<f64>>,
    pub status: Vec<String>,
    /// ln(k / k of the first row).
    pub diff: Vec<Option<f64>>,
    pub mean_abs_ln: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub network: String,
    pub labels: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

pub fn compare_runs(paths: &[PathBuf]) -> Result<Comparison> {
    if paths.len() < 2 {
        return Err(Error::config("reports", format!("compare needs at least two reports, got {}", paths.len())));
    }
    let reports = paths.iter().map(|p| KvReport::read(p).map(|r| (p, r))).collect::<Result<Vec<_>>>()?;
    let field = |p: &Path, r: &KvReport, key: &str| -> Result<String> {
        r.get(key).map(String::from).ok_or_else(|| Error::artifact(p, format!("missing key {key}")))
    };
    let (p0, r0) = &reports[0];
    let network = field(p0, r0, "network")?;
    let labels: Vec<String> = r0
        .entries
        .iter()
        .filter_map(|(k, _)| k.strip_prefix("k_true_").map(String::from))
        .collect();
    let num = |p: &Path, r: &KvReport, key: &str| -> Result<f64> {
        field(p, r, key)?.parse::<f64>().map_err(|e| Error::artifact(p, format!("{key}: {e}")))
    };
    let mut rows: Vec<ComparisonRow> = Vec::new();
    for (p, r) in &reports {
        let net = field(p, r, "network")?;
        if net != network {
            return Err(Error::artifact(p, format!("network {net} differs from {network}")));
        }
        let k = labels.iter().map(|l| num(p, r, &format!("k_{l}"))).collect::<Result<Vec<_>>>()?;
        let k_true = labels.iter().map(|l| num(p, r, &format!("k_true_{l}"))).collect::<Result<Vec<_>>>()?;
        let status = labels.iter().map(|l| field(p, r, &format!("status_{l}"))).collect::<Result<Vec<_>>>()?;
        let ln_ratio = ln_ratios(&k, &k_true);
        let first = rows.first().map_or(&k, |row| &row.k);
        let diff = ln_ratios(&k, first);
        let defined: Vec<f64> = ln_ratio.iter().flatten().map(|v| v.abs()).collect();
        rows.push(ComparisonRow {
            source: p.display().to_string(),
            method: field(p, r, "method")?,
            noise_level: num(p, r, "noise_level")?,
            k,
            ln_ratio,
            status,
            diff,
            mean_abs_ln: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        });
    }
    Ok(Comparison { network, labels, rows })
}

impl Comparison {
    pub fn csv_rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header: Vec<String> = ["source", "method", "noise_level", "mean_abs_ln"].map(String::from).to_vec();
        for l in &self.labels {
            header.extend([format!("k_{l}"), format!("ln_ratio_{l}"), format!("status_{l}"), format!("diff_{l}")]);
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.source.clone(), r.method.clone(), format!("{}", r.noise_level), fmt_opt(r.mean_abs_ln)];
                for j in 0..self.labels.len() {
                    row.extend([format!("{}", r.k[j]), fmt_opt(r.ln_ratio[j]), r.status[j].clone(), fmt_opt(r.diff[j])]);
                }
                row
            })
            .collect();
        (header, rows)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("network {}\n", self.network);
        s += &format!("{:<9} {:>6} {:>9}", "method", "noise", "mean|ln|");
        for l in &self.labels {
            s += &format!(" {:>16}", l);
        }
        s += "\n";
        for r in &self.rows {
            let mean = r.mean_abs_ln.map_or("-".to_string(), |v| format!("{v:.3}"));
            s += &format!("{:<9} {:>6} {:>9}", r.method, r.noise_level, mean);
            for j in 0..self.labels.len() {
                let flag = if r.status[j] == "converged" { ' ' } else { '!' };
                s += &format!(" {:>15}{flag}", format!("{:.4}", r.k[j]));
            }
            s += "\n";
        }
        s += "! marks a parameter flagged as not converged\n";
        s
    }

    /// Writes `comparison.csv` and `comparison.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (header, rows) = self.csv_rows();
        write_table(&dir.join("comparison.csv"), &header, &rows)?;
        fs::write(dir.join("comparison.txt"), self.to_text())?;
        Ok(())
    }
}
