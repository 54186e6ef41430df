//! Run configuration: one TOML file describing the network, reactor, pulse
//! train, dataset, KINN schedule, evaluation and baseline settings, plus the
//! built-in experiment presets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::Smoothing;
use crate::data_pipeline::{Mode, NoiseTarget, SamplingSpec};
use crate::error::{Error, Result};
use crate::kinn::Schedule;
use crate::reaction_model::{Phase, RateConstants, Reaction, ReactionNetwork, Species};
use crate::reactor_sim::{PulseSpec, ReactorConfig};

pub const PRESETS: [&str; 4] =
    ["co-oxidation-single-ideal", "co-oxidation-multi-ideal", "co-oxidation-multi-practical", "co-oxidation-noise-sweep"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesSpec {
    pub name: String,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub molar_mass: Option<f64>,
    #[serde(default)]
    pub elements: BTreeMap<String, u32>,
    /// Sites occupied; defaults to 0 for gases and 1 for adspecies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReactionSpec {
    pub label: String,
    pub units: String,
    pub reactants: BTreeMap<String, u32>,
    pub products: BTreeMap<String, u32>,
}

/// Either a built-in network by name or an inline definition; the
/// co-oxidation network when both are omitted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub name: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub species: Vec<SpeciesSpec>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub reactions: Vec<ReactionSpec>,
}

impl NetworkSpec {
    pub fn is_builtin_co_oxidation(&self) -> bool {
        self.species.is_empty() && matches!(self.preset.as_deref(), None | Some("co-oxidation"))
    }

    pub fn build(&self) -> Result<ReactionNetwork> {
        let net = match (&self.preset, self.species.is_empty()) {
            (Some(p), true) => match p.as_str() {
                "co-oxidation" => ReactionNetwork::co_oxidation(),
                other => return Err(Error::config("network.preset", format!("unknown network preset {other:?}"))),
            },
            (Some(_), false) => {
                return Err(Error::config("network", "give either a preset or an inline species list, not both"))
            }
            (None, true) => ReactionNetwork::co_oxidation(),
            (None, false) => self.build_inline()?,
        };
        let violations = net.validate();
        if let Some(v) = violations.first() {
            return Err(Error::config("network", v.to_string()));
        }
        Ok(net)
    }

    fn build_inline(&self) -> Result<ReactionNetwork> {
        let index: BTreeMap<&str, usize> = self.species.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
        let species: Vec<Species> = self
            .species
            .iter()
            .map(|s| Species {
                name: s.name.clone(),
                phase: s.phase,
                molar_mass: s.molar_mass,
                elements: s.elements.clone(),
            })
            .collect();
        let sites = self
            .species
            .iter()
            .map(|s| s.sites.unwrap_or(if s.phase == Phase::Gas { 0 } else { 1 }))
            .collect();
        let side = |r: &ReactionSpec, m: &BTreeMap<String, u32>| -> Result<Vec<(usize, u32)>> {
            m.iter()
                .map(|(name, &n)| {
                    index.get(name.as_str()).map(|&i| (i, n)).ok_or_else(|| {
                        Error::config(format!("network.reactions.{}", r.label), format!("unknown species {name:?}"))
                    })
                })
                .collect()
        };
        let reactions = self
            .reactions
            .iter()
            .map(|r| Ok(Reaction::from_sides(&r.label, &r.units, &side(r, &r.reactants)?, &side(r, &r.products)?)))
            .collect::<Result<Vec<_>>>()?;
        let name = if self.name.is_empty() { "custom" } else { &self.name };
        ReactionNetwork::new(name, species, reactions, sites).map_err(|e| Error::config("network", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KineticsSection {
    /// Ground-truth rate constants used by the simulator; the network
    /// preset's reference values when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseSection {
    pub intensities: Vec<f64>,
    pub n_pulses: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub injection_width: Option<f64>,
}

impl Default for PulseSection {
    fn default() -> Self {
        PulseSection { intensities: vec![1.0, 1.0, 0.0], n_pulses: 1, injection_width: None }
    }
}

impl PulseSection {
    pub fn spec(&self) -> PulseSpec {
        PulseSpec { intensities: self.intensities.clone(), injection_width: self.injection_width }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub mode: Mode,
    /// Noise standard deviation as a multiple of each series' own spread.
    pub noise_level: f64,
    pub noise_seed: u64,
    pub noise_target: NoiseTarget,
    pub sampling: SamplingSpec,
    pub train_pulses: Vec<usize>,
    pub test_pulses: Vec<usize>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            mode: Mode::Ideal,
            noise_level: 0.0,
            noise_seed: 0,
            noise_target: NoiseTarget::default(),
            sampling: SamplingSpec::default(),
            train_pulses: vec![0],
            test_pulses: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KinnSection {
    pub layers: Vec<usize>,
    /// Adds the site balance to the uptake residuals (practical mode).
    pub site_balance: bool,
    pub schedule: Schedule,
}

impl Default for KinnSection {
    fn default() -> Self {
        KinnSection { layers: vec![1, 8, 6], site_balance: false, schedule: Schedule::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// K, for the energy-scale error.
    pub temperature: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection { temperature: 800.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub smoothing: Smoothing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub noise_levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub network: NetworkSpec,
    pub kinetics: KineticsSection,
    pub reactor: ReactorConfig,
    pub pulse: PulseSection,
    pub dataset: DatasetSection,
    pub kinn: KinnSection,
    pub evaluation: EvaluationSection,
    pub baseline: BaselineSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            network: NetworkSpec::default(),
            kinetics: KineticsSection::default(),
            reactor: ReactorConfig::default(),
            pulse: PulseSection::default(),
            dataset: DatasetSection::default(),
            kinn: KinnSection::default(),
            evaluation: EvaluationSection::default(),
            baseline: BaselineSection::default(),
            sweep: None,
        }
    }
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Simulate,
    Preprocess,
    Fit,
    Evaluate,
    Baseline,
}

impl StageName {
    pub const ALL: [StageName; 5] =
        [StageName::Simulate, StageName::Preprocess, StageName::Fit, StageName::Evaluate, StageName::Baseline];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Simulate => "simulate",
            StageName::Preprocess => "preprocess",
            StageName::Fit => "fit",
            StageName::Evaluate => "evaluate",
            StageName::Baseline => "baseline",
        }
    }

    /// The stage whose artifacts this one reads.
    pub fn upstream(self) -> Option<StageName> {
        match self {
            StageName::Simulate => None,
            StageName::Preprocess => Some(StageName::Simulate),
            StageName::Fit | StageName::Baseline => Some(StageName::Preprocess),
            StageName::Evaluate => Some(StageName::Fit),
        }
    }
}

impl std::fmt::Display for StageName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StageName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageName::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::config("stages", format!("unknown stage {s:?}")))
    }
}

fn toml_text<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("configuration sections serialise")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| format!("byte {}..{}", s.start, s.end)).unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::config("--config", format!("{} does not exist", path.display())));
        }
        let text = fs::read_to_string(path)?;
        let cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config { field, message } => Error::config(field, format!("{}: {message}", path.display())),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml_text(self)
    }

    /// Sets every seed (noise and network initialisation).
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.noise_seed = seed;
        self.kinn.schedule.seed = seed;
    }

    pub fn network(&self) -> Result<ReactionNetwork> {
        self.network.build()
    }

    pub fn rate_constants(&self, net: &ReactionNetwork) -> Result<RateConstants> {
        match &self.kinetics.k {
            Some(k) => RateConstants::new(k.clone()).map_err(|e| Error::config("kinetics.k", e.to_string())),
            None if self.network.is_builtin_co_oxidation() => {
                Ok(RateConstants::co_oxidation_reference())
            }
            None => Err(Error::config("kinetics.k", format!("required for network {}", net.name()))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let net = self.network()?;
        let k = self.rate_constants(&net)?;
        if k.len() != net.n_reactions() {
            return Err(Error::config("kinetics.k", format!("{} values for {} reactions", k.len(), net.n_reactions())));
        }
        self.reactor.validate()?;

        let p = &self.pulse;
        if p.intensities.len() != net.n_gas() {
            return Err(Error::config(
                "pulse.intensities",
                format!("{} values for {} gas species", p.intensities.len(), net.n_gas()),
            ));
        }
        if p.intensities.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config("pulse.intensities", "must be finite and ≥ 0"));
        }
        if p.n_pulses == 0 {
            return Err(Error::config("pulse.n_pulses", "must be at least 1"));
        }

        let d = &self.dataset;
        if d.train_pulses.is_empty() {
            return Err(Error::config("dataset.train_pulses", "at least one training pulse is required"));
        }
        for (field, list) in [("dataset.train_pulses", &d.train_pulses), ("dataset.test_pulses", &d.test_pulses)] {
            if let Some(bad) = list.iter().find(|&&i| i >= p.n_pulses) {
                return Err(Error::config(field, format!("pulse {bad} outside 0..{}", p.n_pulses)));
            }
        }
        if let Some(shared) = d.test_pulses.iter().find(|i| d.train_pulses.contains(i)) {
            return Err(Error::config("dataset.test_pulses", format!("pulse {shared} is also a training pulse")));
        }
        if !(d.noise_level >= 0.0 && d.noise_level.is_finite()) {
            return Err(Error::config("dataset.noise_level", "must be finite and ≥ 0"));
        }
        if d.mode == Mode::Ideal && d.noise_level != 0.0 {
            return Err(Error::config("dataset.noise_level", "ideal mode is noiseless; use mode = \"practical\""));
        }
        let s = &d.sampling;
        if s.n_points < 2 {
            return Err(Error::config("dataset.sampling.n_points", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&s.split_fraction) {
            return Err(Error::config("dataset.sampling.split_fraction", "must lie in [0, 1]"));
        }
        if !(s.split_time > 0.0 && s.split_time <= self.reactor.time_horizon) {
            return Err(Error::config("dataset.sampling.split_time", "must lie in (0, time_horizon]"));
        }

        let layers = &self.kinn.layers;
        if layers.len() < 2 || layers.contains(&0) {
            return Err(Error::config("kinn.layers", "need at least input and output widths, all positive"));
        }
        if *layers.last().unwrap() != net.n_species() {
            return Err(Error::config("kinn.layers", format!("output width must equal {} species", net.n_species())));
        }
        if layers[0] != 1 && layers[0] != 1 + net.n_gas() {
            return Err(Error::config(
                "kinn.layers",
                format!("input width must be 1 (time) or {} (time and gas moments)", 1 + net.n_gas()),
            ));
        }
        self.kinn.schedule.validate()?;
        if self.kinn.site_balance && d.mode == Mode::Ideal {
            return Err(Error::config("kinn.site_balance", "only used with practical datasets"));
        }

        if !(self.evaluation.temperature > 0.0 && self.evaluation.temperature.is_finite()) {
            return Err(Error::config("evaluation.temperature", "must be positive"));
        }
        if let Smoothing::Savgol { window, order } = self.baseline.smoothing {
            if window % 2 == 0 || window <= order || order == 0 {
                return Err(Error::config(
                    "baseline.smoothing",
                    format!("window {window} must be odd and exceed order {order} ≥ 1"),
                ));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.noise_levels.is_empty() || sw.noise_levels.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::config("sweep.noise_levels", "need one or more finite levels ≥ 0"));
            }
            if d.mode != Mode::Practical {
                return Err(Error::config("sweep", "noise sweeps run on practical datasets"));
            }
        }
        Ok(())
    }

    fn section_texts(&self, stage: StageName) -> Vec<String> {
        let mut parts = match stage.upstream() {
            Some(up) => self.section_texts(up),
            None => Vec::new(),
        };
        match stage {
            StageName::Simulate => {
                parts.push(toml_text(&self.network));
                parts.push(toml_text(&self.kinetics));
                parts.push(toml_text(&self.reactor));
                parts.push(toml_text(&self.pulse));
            }
            StageName::Preprocess => parts.push(toml_text(&self.dataset)),
            StageName::Fit => parts.push(toml_text(&self.kinn)),
            StageName::Evaluate => parts.push(toml_text(&self.evaluation)),
            StageName::Baseline => parts.push(toml_text(&self.baseline)),
        }
        parts
    }

    /// SHA-256 over the configuration sections a stage and its upstream
    /// stages depend on.
    pub fn stage_hash(&self, stage: StageName) -> String {
        let mut h = Sha256::new();
        for part in self.section_texts(stage) {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        hex(&h.finalize())
    }

    pub fn preset(name: &str) -> Result<Self> {
        let multi = |mode: Mode, noise: f64, beta: f64, name: &str| RunConfig {
            name: name.into(),
            pulse: PulseSection { n_pulses: 10, ..Default::default() },
            dataset: DatasetSection {
                mode,
                noise_level: noise,
                train_pulses: vec![0, 1, 2, 5, 8],
                test_pulses: vec![3, 4, 6, 7, 9],
                ..Default::default()
            },
            kinn: KinnSection {
                layers: vec![4, 10, 10, 6],
                site_balance: mode == Mode::Practical,
                schedule: Schedule {
                    stages: Schedule::ladder(1e-10, 1e-3, beta, 5),
                    iterations_per_epoch: MULTI_ITERATIONS,
                    ..Default::default()
                },
            },
            ..Default::default()
        };
        let cfg = match name {
            "co-oxidation-single-ideal" => RunConfig {
                name: name.into(),
                kinn: KinnSection {
                    layers: vec![1, 8, 6],
                    site_balance: false,
                    schedule: Schedule { iterations_per_epoch: SINGLE_ITERATIONS, ..Default::default() },
                },
                ..Default::default()
            },
            "co-oxidation-multi-ideal" => multi(Mode::Ideal, 0.0, 0.0, name),
            "co-oxidation-multi-practical" => multi(Mode::Practical, 0.5, 1.0, name),
            "co-oxidation-noise-sweep" => RunConfig {
                sweep: Some(SweepSection { noise_levels: vec![0.5, 1.0, 2.0] }),
                ..multi(Mode::Practical, 0.5, 1.0, name)
            },
            other => {
                return Err(Error::config("--preset", format!("unknown preset {other:?}; known: {}", PRESETS.join(", "))))
            }
        };
        Ok(cfg)
    }
}

/// Iterations per epoch of the single-pulse preset.
pub const SINGLE_ITERATIONS: usize = 10_000;
/// Iterations per epoch of the multi-pulse presets.
pub const MULTI_ITERATIONS: usize = 1000;

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in PRESETS {
            let cfg = RunConfig::preset(p).unwrap();
            cfg.validate().unwrap();
            let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg, "{p}");
        }
        assert!(matches!(RunConfig::preset("nope"), Err(Error::Config { .. })));
    }

    #[test]
    fn overlapping_pulses_name_the_field() {
        let mut cfg = RunConfig::preset("co-oxidation-multi-ideal").unwrap();
        cfg.dataset.test_pulses.push(5);
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "dataset.test_pulses"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stage_hashes_follow_dependencies() {
        let a = RunConfig::preset("co-oxidation-single-ideal").unwrap();
        let mut b = a.clone();
        b.kinn.schedule.seed = 9;
        assert_eq!(a.stage_hash(StageName::Preprocess), b.stage_hash(StageName::Preprocess));
        assert_ne!(a.stage_hash(StageName::Fit), b.stage_hash(StageName::Fit));
        assert_eq!(a.stage_hash(StageName::Baseline), b.stage_hash(StageName::Baseline));
        b.reactor.site_density = 31.0;
        assert_ne!(a.stage_hash(StageName::Simulate), b.stage_hash(StageName::Simulate));
    }

    #[test]
    fn inline_network_matches_builtin() {
        let text = r#"
            [network]
            name = "co-inline"
            species = [
              { name = "CO", phase = "gas", molar_mass = 28.01, elements = { C = 1, O = 1 } },
              { name = "O2", phase = "gas", molar_mass = 32.0, elements = { O = 2 } },
              { name = "CO2", phase = "gas", molar_mass = 44.01, elements = { C = 1, O = 2 } },
              { name = "CO*", phase = "surface", elements = { C = 1, O = 1 } },
              { name = "O*", phase = "surface", elements = { O = 1 } },
              { name = "*", phase = "surface" },
            ]
            reactions = [
              { label = "k1", units = "cm3/(nmol s)", reactants = { CO = 1, "*" = 1 }, products = { "CO*" = 1 } },
              { label = "k-1", units = "1/s", reactants = { "CO*" = 1 }, products = { CO = 1, "*" = 1 } },
              { label = "k2", units = "cm6/(nmol2 s)", reactants = { O2 = 1, "*" = 2 }, products = { "O*" = 2 } },
              { label = "k3", units = "cm3/(nmol s)", reactants = { "CO*" = 1, "O*" = 1 }, products = { CO2 = 1, "*" = 2 } },
              { label = "k-3", units = "cm6/(nmol2 s)", reactants = { CO2 = 1, "*" = 2 }, products = { "CO*" = 1, "O*" = 1 } },
              { label = "k4", units = "cm3/(nmol s)", reactants = { CO = 1, "O*" = 1 }, products = { CO2 = 1, "*" = 1 } },
            ]
            [kinetics]
            k = [15.0, 0.70, 0.33, 0.40, 0.02, 15.2]
        "#;
        let cfg = RunConfig::from_toml(text).unwrap();
        cfg.validate().unwrap();
        let inline = cfg.network().unwrap();
        let builtin = ReactionNetwork::co_oxidation();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(inline.stoich(i, j), builtin.stoich(i, j));
                assert_eq!(inline.order(j, i), builtin.order(j, i));
            }
        }
        let bad = text.replace("products = { \"O*\" = 2 }", "products = { \"O*\" = 1 }");
        assert!(matches!(RunConfig::from_toml(&bad).unwrap().validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("[dataset]\nnoise = 1.0\n"), Err(Error::Config { .. })));
        let cfg = RunConfig::from_toml("[dataset]\nnoise_level = 0.5\n").unwrap();
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "dataset.noise_level"),
            other => panic!("{other:?}"),
        }
    }
}
