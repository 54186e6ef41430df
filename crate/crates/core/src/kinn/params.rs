//! Trained KINN parameters and their text file format.
//!
//! ```text
//! tapkinn-params 1
//! layers 1 8 6
//! species CO O2 CO2 CO* O* *
//! scale_species <one value per species>
//! scale_moments <one value per gas>
//! scale_uptake <value>
//! reaction <label> <units...>        (one line per reaction)
//! weights <count>
//! <one value per line>
//! kinetic_raw <count>
//! <one value per line>
//! ```
//! Weights are stored layer by layer, each layer as its row-major
//! (outputs × inputs) matrix followed by its biases. The rate law uses
//! `k = |kinetic_raw|`.

use std::fs;
use std::path::Path;

use crate::data_pipeline::ScalingInfo;
use crate::error::{Error, Result};

use super::model::KinnModel;

pub const FORMAT_TAG: &str = "tapkinn-params";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct KinnParameters {
    pub layer_sizes: Vec<usize>,
    pub species: Vec<String>,
    pub scaling: ScalingInfo,
    /// `(label, units)` per reaction.
    pub reactions: Vec<(String, String)>,
    pub weights: Vec<f64>,
    pub kinetic_raw: Vec<f64>,
}

impl KinnParameters {
    pub fn from_flat(model: &KinnModel, theta: &[f64]) -> Result<Self> {
        if theta.len() != model.n_params() {
            return Err(Error::Dimension(format!("{} parameters, model needs {}", theta.len(), model.n_params())));
        }
        let (w, k) = theta.split_at(model.n_weights());
        Ok(KinnParameters {
            layer_sizes: model.mlp.sizes().to_vec(),
            species: model.net.species_names().iter().map(|s| s.to_string()).collect(),
            scaling: model.scaling.clone(),
            reactions: model.net.reactions().iter().map(|r| (r.label.clone(), r.units.clone())).collect(),
            weights: w.to_vec(),
            kinetic_raw: k.to_vec(),
        })
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.extend_from_slice(&self.kinetic_raw);
        v
    }

    /// Rate constants as seen by the rate law.
    pub fn rate_constants(&self) -> Vec<f64> {
        self.kinetic_raw.iter().map(|v| v.abs()).collect()
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
        let mut s = format!("{FORMAT_TAG} {FORMAT_VERSION}\n");
        s += &format!("layers {}\n", self.layer_sizes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" "));
        s += &format!("species {}\n", self.species.join(" "));
        s += &format!("scale_species {}\n", join(&self.scaling.species));
        s += &format!("scale_moments {}\n", join(&self.scaling.moments));
        s += &format!("scale_uptake {}\n", self.scaling.uptake);
        for (label, units) in &self.reactions {
            s += &format!("reaction {label} {units}\n");
        }
        s += &format!("weights {}\n", self.weights.len());
        for w in &self.weights {
            s += &format!("{w}\n");
        }
        s += &format!("kinetic_raw {}\n", self.kinetic_raw.len());
        for k in &self.kinetic_raw {
            s += &format!("{k}\n");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if self.species.iter().chain(self.reactions.iter().map(|r| &r.0)).any(|n| n.contains(char::is_whitespace)) {
            return Err(Error::InvalidInput("species and reaction labels must not contain whitespace".into()));
        }
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        Self::parse(&fs::read_to_string(path)?).map_err(|m| Error::artifact(path, m))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let mut next = |what: &str| -> std::result::Result<(String, String), String> {
            let line = lines.next().ok_or_else(|| format!("missing {what}"))?;
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            Ok((key.to_string(), rest.to_string()))
        };
        let floats = |s: &str| -> std::result::Result<Vec<f64>, String> {
            s.split_whitespace().map(|v| v.parse::<f64>().map_err(|e| format!("bad number {v:?}: {e}"))).collect()
        };
        let expect = |got: &(String, String), key: &str| -> std::result::Result<(), String> {
            if got.0 == key {
                Ok(())
            } else {
                Err(format!("expected {key:?}, found {:?}", got.0))
            }
        };

        let header = next("header")?;
        expect(&header, FORMAT_TAG)?;
        if header.1.trim() != FORMAT_VERSION.to_string() {
            return Err(format!("unsupported format version {}", header.1.trim()));
        }
        let layers = next("layers")?;
        expect(&layers, "layers")?;
        let layer_sizes: Vec<usize> = layers
            .1
            .split_whitespace()
            .map(|v| v.parse().map_err(|e| format!("bad layer size {v:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        let species = next("species")?;
        expect(&species, "species")?;
        let species: Vec<String> = species.1.split_whitespace().map(String::from).collect();
        let ss = next("scale_species")?;
        expect(&ss, "scale_species")?;
        let sm = next("scale_moments")?;
        expect(&sm, "scale_moments")?;
        let su = next("scale_uptake")?;
        expect(&su, "scale_uptake")?;
        let scaling = ScalingInfo {
            species: floats(&ss.1)?,
            moments: floats(&sm.1)?,
            uptake: su.1.trim().parse().map_err(|e| format!("bad uptake scale: {e}"))?,
        };
        let mut reactions = Vec::new();
        let mut line = next("weights")?;
        while line.0 == "reaction" {
            let (label, units) = line.1.split_once(' ').unwrap_or((&line.1, ""));
            reactions.push((label.to_string(), units.to_string()));
            line = next("weights")?;
        }
        expect(&line, "weights")?;
        let weights = read_block(&mut next, &line.1)?;
        let kline = next("kinetic_raw")?;
        expect(&kline, "kinetic_raw")?;
        let kinetic_raw = read_block(&mut next, &kline.1)?;
        let expected: usize = layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        if weights.len() != expected {
            return Err(format!("{} weights for layers {layer_sizes:?} (expected {expected})", weights.len()));
        }
        if kinetic_raw.len() != reactions.len() {
            return Err(format!("{} kinetic values for {} reactions", kinetic_raw.len(), reactions.len()));
        }
        Ok(KinnParameters { layer_sizes, species, scaling, reactions, weights, kinetic_raw })
    }
}

type Line = std::result::Result<(String, String), String>;

fn read_block(next: &mut impl FnMut(&str) -> Line, count: &str) -> std::result::Result<Vec<f64>, String> {
    let n: usize = count.trim().parse().map_err(|e| format!("bad count: {e}"))?;
    (0..n)
        .map(|_| {
            let (v, _) = next("value")?;
            v.parse::<f64>().map_err(|e| format!("bad number {v:?}: {e}"))
        })
        .collect()
}
