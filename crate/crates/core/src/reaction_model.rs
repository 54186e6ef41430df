//! Micro-kinetic reaction networks with elementary mass-action rate laws.
//!
//! A network holds the species (gas phase first, then adspecies), the
//! stoichiometry matrix `M` (species x reactions), an explicit power-law
//! order matrix (reactions x species), the element composition of every
//! species and the number of surface sites each adspecies occupies.
//!
//! Rates follow `r = M (k ∘ ψ(c))` with `ψ_j(c) = Π_i c_i^order[j][i]`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Gas,
    Surface,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Species {
    pub name: String,
    pub phase: Phase,
    /// g/mol; only meaningful for gas species (Knudsen scaling).
    pub molar_mass: Option<f64>,
    pub elements: BTreeMap<String, u32>,
}

impl Species {
    pub fn gas(name: &str, molar_mass: f64, elements: &[(&str, u32)]) -> Self {
        Species {
            name: name.to_string(),
            phase: Phase::Gas,
            molar_mass: Some(molar_mass),
            elements: elements.iter().map(|&(e, n)| (e.to_string(), n)).collect(),
        }
    }

    pub fn surface(name: &str, elements: &[(&str, u32)]) -> Self {
        Species {
            name: name.to_string(),
            phase: Phase::Surface,
            molar_mass: None,
            elements: elements.iter().map(|&(e, n)| (e.to_string(), n)).collect(),
        }
    }

    pub fn is_gas(&self) -> bool {
        self.phase == Phase::Gas
    }
}

/// One elementary step.
#[derive(Debug, Clone, PartialEq)]
pub struct Reaction {
    pub label: String,
    pub units: String,
    /// `(species index, signed coefficient)`, reactants negative.
    pub stoich: Vec<(usize, i32)>,
    /// `(species index, power-law order)`.
    pub orders: Vec<(usize, u32)>,
}

impl Reaction {
    /// Elementary step from its two sides; orders equal the reactant coefficients.
    pub fn from_sides(
        label: &str,
        units: &str,
        reactants: &[(usize, u32)],
        products: &[(usize, u32)],
    ) -> Self {
        let mut net: BTreeMap<usize, i32> = BTreeMap::new();
        for &(i, n) in reactants {
            *net.entry(i).or_default() -= n as i32;
        }
        for &(i, n) in products {
            *net.entry(i).or_default() += n as i32;
        }
        let mut orders: BTreeMap<usize, u32> = BTreeMap::new();
        for &(i, n) in reactants {
            *orders.entry(i).or_default() += n;
        }
        Reaction {
            label: label.to_string(),
            units: units.to_string(),
            stoich: net.into_iter().filter(|&(_, v)| v != 0).collect(),
            orders: orders.into_iter().filter(|&(_, o)| o > 0).collect(),
        }
    }
}

/// A diagnostic produced by [`ReactionNetwork::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    PhaseOrdering { species: String },
    MissingMolarMass { species: String },
    SiteCount { species: String, count: u32 },
    OrderMismatch { reaction: String, species: String, order: u32, stoich: i32 },
    ElementImbalance { reaction: String, element: String, net: i64 },
    SiteImbalance { reaction: String, net: i64 },
    DuplicateSpecies { species: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::PhaseOrdering { species } => {
                write!(f, "gas species {species} listed after a surface species")
            }
            Violation::MissingMolarMass { species } => {
                write!(f, "gas species {species} has no positive molar mass")
            }
            Violation::SiteCount { species, count } => {
                write!(f, "species {species} has inconsistent site count {count}")
            }
            Violation::OrderMismatch { reaction, species, order, stoich } => write!(
                f,
                "reaction {reaction}: order {order} for {species} does not match stoichiometric coefficient {stoich}"
            ),
            Violation::ElementImbalance { reaction, element, net } => {
                write!(f, "reaction {reaction}: element {element} not conserved (net {net})")
            }
            Violation::SiteImbalance { reaction, net } => {
                write!(f, "reaction {reaction}: surface sites not conserved (net {net})")
            }
            Violation::DuplicateSpecies { species } => write!(f, "species {species} listed twice"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionNetwork {
    name: String,
    species: Vec<Species>,
    elements: Vec<String>,
    reactions: Vec<Reaction>,
    site_counts: Vec<u32>,
    n_gas: usize,
    /// Dense stoichiometry, species-major (`n x m`).
    stoich: Vec<i32>,
}

impl ReactionNetwork {
    /// Builds a network. Only index bounds are checked here; chemical
    /// consistency is reported by [`validate`](Self::validate).
    pub fn new(
        name: &str,
        species: Vec<Species>,
        reactions: Vec<Reaction>,
        site_counts: Vec<u32>,
    ) -> Result<Self> {
        let n = species.len();
        if site_counts.len() != n {
            return Err(Error::Dimension(format!(
                "{} site counts for {} species",
                site_counts.len(),
                n
            )));
        }
        for r in &reactions {
            let indices = r.stoich.iter().map(|&(i, _)| i).chain(r.orders.iter().map(|&(i, _)| i));
            if let Some(i) = indices.into_iter().find(|&i| i >= n) {
                return Err(Error::Dimension(format!(
                    "reaction {} references species index {i} of {n}",
                    r.label
                )));
            }
        }
        let elements: Vec<String> = species
            .iter()
            .flat_map(|s| s.elements.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let n_gas = species.iter().take_while(|s| s.is_gas()).count();
        let mut net = ReactionNetwork {
            name: name.to_string(),
            species,
            elements,
            reactions,
            site_counts,
            n_gas,
            stoich: Vec::new(),
        };
        net.rebuild_dense();
        Ok(net)
    }

    fn rebuild_dense(&mut self) {
        let (n, m) = (self.species.len(), self.reactions.len());
        self.stoich = vec![0; n * m];
        for (j, r) in self.reactions.iter().enumerate() {
            for &(i, nu) in &r.stoich {
                self.stoich[i * m + j] += nu;
            }
        }
    }

    /// CO oxidation on a single site type: species order (CO, O2, CO2, CO*, O*, *)
    /// and the six steps k1, k-1, k2, k3, k-3, k4.
    pub fn co_oxidation() -> Self {
        let species = vec![
            Species::gas("CO", 28.01, &[("C", 1), ("O", 1)]),
            Species::gas("O2", 32.00, &[("O", 2)]),
            Species::gas("CO2", 44.01, &[("C", 1), ("O", 2)]),
            Species::surface("CO*", &[("C", 1), ("O", 1)]),
            Species::surface("O*", &[("O", 1)]),
            Species::surface("*", &[]),
        ];
        const CO: usize = 0;
        const O2: usize = 1;
        const CO2: usize = 2;
        const CO_S: usize = 3;
        const O_S: usize = 4;
        const FREE: usize = 5;
        let bi = "cm3/(nmol s)";
        let tri = "cm6/(nmol2 s)";
        let reactions = vec![
            Reaction::from_sides("k1", bi, &[(CO, 1), (FREE, 1)], &[(CO_S, 1)]),
            Reaction::from_sides("k-1", "1/s", &[(CO_S, 1)], &[(CO, 1), (FREE, 1)]),
            Reaction::from_sides("k2", tri, &[(O2, 1), (FREE, 2)], &[(O_S, 2)]),
            Reaction::from_sides("k3", bi, &[(CO_S, 1), (O_S, 1)], &[(CO2, 1), (FREE, 2)]),
            Reaction::from_sides("k-3", tri, &[(CO2, 1), (FREE, 2)], &[(CO_S, 1), (O_S, 1)]),
            Reaction::from_sides("k4", bi, &[(CO, 1), (O_S, 1)], &[(CO2, 1), (FREE, 1)]),
        ];
        ReactionNetwork::new("co-oxidation", species, reactions, vec![0, 0, 0, 1, 1, 1])
            .expect("built-in network is well formed")
    }

    /// A single non-reactive gas, used for transport validation.
    pub fn inert(name: &str, molar_mass: f64) -> Self {
        ReactionNetwork::new(
            "inert",
            vec![Species::gas(name, molar_mass, &[])],
            Vec::new(),
            vec![0],
        )
        .expect("built-in network is well formed")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn species(&self) -> &[Species] {
        &self.species
    }

    pub fn species_names(&self) -> Vec<&str> {
        self.species.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    pub fn reactions(&self) -> &[Reaction] {
        &self.reactions
    }

    pub fn reaction_labels(&self) -> Vec<&str> {
        self.reactions.iter().map(|r| r.label.as_str()).collect()
    }

    pub fn elements(&self) -> &[String] {
        &self.elements
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn n_gas(&self) -> usize {
        self.n_gas
    }

    pub fn n_surface(&self) -> usize {
        self.species.len() - self.n_gas
    }

    pub fn n_reactions(&self) -> usize {
        self.reactions.len()
    }

    pub fn site_counts(&self) -> &[u32] {
        &self.site_counts
    }

    /// `M[i][j]`.
    pub fn stoich(&self, species: usize, reaction: usize) -> i32 {
        self.stoich[species * self.reactions.len() + reaction]
    }

    /// Power-law order of `species` in `reaction`.
    pub fn order(&self, reaction: usize, species: usize) -> u32 {
        self.reactions[reaction]
            .orders
            .iter()
            .find(|&&(i, _)| i == species)
            .map_or(0, |&(_, o)| o)
    }

    /// Count of `element` (index into [`elements`](Self::elements)) in `species`.
    pub fn element_count(&self, element: usize, species: usize) -> u32 {
        self.species[species]
            .elements
            .get(&self.elements[element])
            .copied()
            .unwrap_or(0)
    }

    /// Element composition matrix `E`, elements x species.
    pub fn element_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.elements.len())
            .map(|e| (0..self.n_species()).map(|i| self.element_count(e, i) as f64).collect())
            .collect()
    }

    pub fn set_stoich(&mut self, species: usize, reaction: usize, coef: i32) {
        let r = &mut self.reactions[reaction];
        r.stoich.retain(|&(i, _)| i != species);
        if coef != 0 {
            r.stoich.push((species, coef));
            r.stoich.sort_unstable();
        }
        self.rebuild_dense();
    }

    pub fn set_order(&mut self, reaction: usize, species: usize, order: u32) {
        let r = &mut self.reactions[reaction];
        r.orders.retain(|&(i, _)| i != species);
        if order != 0 {
            r.orders.push((species, order));
            r.orders.sort_unstable();
        }
    }

    /// Lists every broken network invariant; empty when the network is consistent.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut surface_seen = false;
        for (i, s) in self.species.iter().enumerate() {
            if !seen.insert(s.name.as_str()) {
                out.push(Violation::DuplicateSpecies { species: s.name.clone() });
            }
            match s.phase {
                Phase::Gas => {
                    if surface_seen {
                        out.push(Violation::PhaseOrdering { species: s.name.clone() });
                    }
                    if !s.molar_mass.is_some_and(|m| m > 0.0 && m.is_finite()) {
                        out.push(Violation::MissingMolarMass { species: s.name.clone() });
                    }
                    if self.site_counts[i] != 0 {
                        out.push(Violation::SiteCount {
                            species: s.name.clone(),
                            count: self.site_counts[i],
                        });
                    }
                }
                Phase::Surface => {
                    surface_seen = true;
                    if self.site_counts[i] == 0 {
                        out.push(Violation::SiteCount { species: s.name.clone(), count: 0 });
                    }
                }
            }
        }
        for (j, r) in self.reactions.iter().enumerate() {
            for i in 0..self.n_species() {
                let nu = self.stoich(i, j);
                let expected = if nu < 0 { (-nu) as u32 } else { 0 };
                let order = self.order(j, i);
                if order != expected {
                    out.push(Violation::OrderMismatch {
                        reaction: r.label.clone(),
                        species: self.species[i].name.clone(),
                        order,
                        stoich: nu,
                    });
                }
            }
            for (e, element) in self.elements.iter().enumerate() {
                let net: i64 = (0..self.n_species())
                    .map(|i| self.element_count(e, i) as i64 * self.stoich(i, j) as i64)
                    .sum();
                if net != 0 {
                    out.push(Violation::ElementImbalance {
                        reaction: r.label.clone(),
                        element: element.clone(),
                        net,
                    });
                }
            }
            let sites: i64 = (self.n_gas..self.n_species())
                .map(|i| self.site_counts[i] as i64 * self.stoich(i, j) as i64)
                .sum();
            if sites != 0 {
                out.push(Violation::SiteImbalance { reaction: r.label.clone(), net: sites });
            }
        }
        out
    }

    fn check_inputs(&self, c: &[f64], k: &RateConstants) -> Result<()> {
        if c.len() != self.n_species() {
            return Err(Error::Dimension(format!(
                "{} concentrations for {} species",
                c.len(),
                self.n_species()
            )));
        }
        if k.len() != self.n_reactions() {
            return Err(Error::Dimension(format!(
                "{} rate constants for {} reactions",
                k.len(),
                self.n_reactions()
            )));
        }
        if let Some((i, v)) = c.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "concentration of {} is {v}",
                self.species[i].name
            )));
        }
        Ok(())
    }

    /// Per-reaction rates `k_j ψ_j(c)`, nmol/(cm³ s).
    pub fn elementary_rates(&self, c: &[f64], k: &RateConstants) -> Result<Vec<f64>> {
        self.check_inputs(c, k)?;
        let mut out = vec![0.0; self.n_reactions()];
        self.rates_into(c, k.as_slice(), &mut out);
        Ok(out)
    }

    /// Per-species net rates `M (k ∘ ψ(c))`, nmol/(cm³ s).
    pub fn species_rates(&self, c: &[f64], k: &RateConstants) -> Result<Vec<f64>> {
        self.check_inputs(c, k)?;
        let mut out = vec![0.0; self.n_species()];
        self.species_rates_into(c, k.as_slice(), &mut out);
        Ok(out)
    }

    // Unchecked kernels below; callers guarantee slice lengths.

    #[inline]
    pub fn psi_into(&self, c: &[f64], psi: &mut [f64]) {
        for (p, r) in psi.iter_mut().zip(&self.reactions) {
            *p = r.orders.iter().fold(1.0, |acc, &(i, o)| acc * c[i].powi(o as i32));
        }
    }

    #[inline]
    pub fn rates_into(&self, c: &[f64], k: &[f64], out: &mut [f64]) {
        self.psi_into(c, out);
        for (o, kj) in out.iter_mut().zip(k) {
            *o *= kj;
        }
    }

    #[inline]
    pub fn species_rates_into(&self, c: &[f64], k: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (r, &kj) in self.reactions.iter().zip(k) {
            let rate = kj * r.orders.iter().fold(1.0, |acc, &(i, o)| acc * c[i].powi(o as i32));
            for &(i, nu) in &r.stoich {
                out[i] += nu as f64 * rate;
            }
        }
    }

    /// `∂ψ_j/∂c_i`, reactions x species, row-major.
    pub fn psi_jacobian_into(&self, c: &[f64], out: &mut [f64]) {
        let n = self.n_species();
        out.fill(0.0);
        for (j, r) in self.reactions.iter().enumerate() {
            for (a, &(i, o)) in r.orders.iter().enumerate() {
                let mut d = o as f64 * c[i].powi(o as i32 - 1);
                for (b, &(l, ol)) in r.orders.iter().enumerate() {
                    if a != b {
                        d *= c[l].powi(ol as i32);
                    }
                }
                out[j * n + i] = d;
            }
        }
    }

    /// `∂r_i/∂c_l` of the species rates, species x species, row-major.
    pub fn species_rate_jacobian_into(&self, c: &[f64], k: &[f64], out: &mut [f64]) {
        let n = self.n_species();
        out.fill(0.0);
        for (r, &kj) in self.reactions.iter().zip(k) {
            for (a, &(l, o)) in r.orders.iter().enumerate() {
                let mut d = kj * o as f64 * c[l].powi(o as i32 - 1);
                for (b, &(q, oq)) in r.orders.iter().enumerate() {
                    if a != b {
                        d *= c[q].powi(oq as i32);
                    }
                }
                for &(i, nu) in &r.stoich {
                    out[i * n + l] += nu as f64 * d;
                }
            }
        }
    }
}

/// Nonnegative rate constants, one per reaction.
#[derive(Debug, Clone, PartialEq)]
pub struct RateConstants(Vec<f64>);

impl RateConstants {
    pub fn new(k: Vec<f64>) -> Result<Self> {
        if let Some(v) = k.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!("rate constant {v} is not finite and nonnegative")));
        }
        Ok(RateConstants(k))
    }

    pub fn zeros(m: usize) -> Self {
        RateConstants(vec![0.0; m])
    }

    /// Reference constants used to generate synthetic CO oxidation data,
    /// in the order k1, k-1, k2, k3, k-3, k4.
    pub fn co_oxidation_reference() -> Self {
        RateConstants(vec![15.0, 0.70, 0.33, 0.40, 0.02, 15.2])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, a: f64) -> Self {
        RateConstants(self.0.iter().map(|k| k * a).collect())
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}
