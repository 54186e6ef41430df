use crate::data_pipeline::{DatasetMeta, Mode, PulseSamples, ScalingInfo, ThinZone};
use crate::error::{Error, Result};
use crate::reaction_model::ReactionNetwork;

use super::mlp::{Mlp, Tape};

/// Loss components at one parameter point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub j_data: f64,
    pub j_model: f64,
    pub j_uptake: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        self.j_data.is_finite() && self.j_model.is_finite() && self.j_uptake.is_finite() && self.total.is_finite()
    }
}

/// Network output and time derivative in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `[species][time]`, nmol/cm³.
    pub conc: Vec<Vec<f64>>,
    /// `[species][time]`, nmol/(cm³ s).
    pub rate: Vec<Vec<f64>>,
}

/// A KINN bound to a reaction network and the scaling of its dataset.
///
/// Parameters are passed as one flat slice: network weights followed by the
/// raw kinetic parameters, with `k = |raw|` as seen by the rate law.
#[derive(Debug, Clone)]
pub struct KinnModel<'a> {
    pub mlp: Mlp,
    pub net: &'a ReactionNetwork,
    pub scaling: ScalingInfo,
    pub zone: ThinZone,
    pub mode: Mode,
    pub observed: Vec<bool>,
    /// Adds `Σ sites·c_s = site density` to the uptake residuals.
    pub site_balance: bool,
}

/// Reusable buffers for per-sample evaluation.
struct Scratch {
    tape: Tape,
    x: Vec<f64>,
    c: Vec<f64>,
    r: Vec<f64>,
    psi: Vec<f64>,
    jac: Vec<f64>,
    ybar: Vec<f64>,
    ydbar: Vec<f64>,
    lambda: Vec<f64>,
}

impl<'a> KinnModel<'a> {
    pub fn new(layer_sizes: Vec<usize>, net: &'a ReactionNetwork, meta: &DatasetMeta) -> Result<Self> {
        let mlp = Mlp::kinn(layer_sizes)?;
        if mlp.n_outputs() != net.n_species() {
            return Err(Error::config(
                "kinn.layers",
                format!("{} outputs for {} species", mlp.n_outputs(), net.n_species()),
            ));
        }
        let n_in = mlp.n_inputs();
        if n_in != 1 && n_in != 1 + net.n_gas() {
            return Err(Error::config(
                "kinn.layers",
                format!("input width must be 1 (time) or {} (time and gas moments), got {n_in}", 1 + net.n_gas()),
            ));
        }
        let names: Vec<&str> = net.species_names();
        if meta.species.iter().map(String::as_str).ne(names.iter().copied()) {
            return Err(Error::config("network", "dataset species order does not match the reaction network"));
        }
        Ok(KinnModel {
            mlp,
            net,
            scaling: meta.scaling.clone(),
            zone: meta.zone,
            mode: meta.mode,
            observed: meta.observed.clone(),
            site_balance: false,
        })
    }

    pub fn n_weights(&self) -> usize {
        self.mlp.n_params()
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params() + self.net.n_reactions()
    }

    pub fn uses_moments(&self) -> bool {
        self.mlp.n_inputs() > 1
    }

    fn check_params(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::Dimension(format!("{} parameters, model needs {}", theta.len(), self.n_params())));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(())
    }

    fn fill_features(&self, t: f64, moments: &[f64], x: &mut [f64]) {
        x[0] = t.ln();
        for (i, xi) in x.iter_mut().enumerate().skip(1) {
            *xi = moments[i - 1] / self.scaling.moments[i - 1];
        }
    }

    /// Network input for a sample at time `t` of a pulse with zeroth moments `moments`.
    pub fn features(&self, t: f64, moments: &[f64]) -> Result<Vec<f64>> {
        if !(t > 0.0) {
            return Err(Error::InvalidInput(format!("time {t} must be positive")));
        }
        if self.uses_moments() && moments.len() != self.net.n_gas() {
            return Err(Error::Dimension(format!("{} moments for {} gases", moments.len(), self.net.n_gas())));
        }
        let mut x = vec![0.0; self.mlp.n_inputs()];
        self.fill_features(t, moments, &mut x);
        Ok(x)
    }

    fn scratch(&self) -> Scratch {
        let n = self.net.n_species();
        let m = self.net.n_reactions();
        Scratch {
            tape: self.mlp.tape(),
            x: vec![0.0; self.mlp.n_inputs()],
            c: vec![0.0; n],
            r: vec![0.0; n],
            psi: vec![0.0; m],
            jac: vec![0.0; n * n],
            ybar: vec![0.0; n],
            ydbar: vec![0.0; n],
            lambda: vec![0.0; n],
        }
    }

    /// Concentrations and their time derivatives at `t`.
    pub fn state_and_derivative(&self, theta: &[f64], t: f64, moments: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_params(theta)?;
        let x = self.features(t, moments)?;
        let mut tape = self.mlp.tape();
        self.mlp.forward_unchecked(&theta[..self.n_weights()], &x, &mut tape);
        let s = &self.scaling.species;
        let c = tape.output().iter().zip(s).map(|(n, s)| s * n).collect();
        let dc = tape.output_tangent().iter().zip(s).map(|(n, s)| s * n / t).collect();
        Ok((c, dc))
    }

    /// Scaled residual of the thin-zone balance at `t` given net gas flux `g`.
    pub fn model_residual(&self, theta: &[f64], t: f64, moments: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.net.n_gas() {
            return Err(Error::Dimension(format!("{} net-flux values for {} gases", g.len(), self.net.n_gas())));
        }
        let (c, dc) = self.state_and_derivative(theta, t, moments)?;
        let k: Vec<f64> = theta[self.n_weights()..].iter().map(|v| v.abs()).collect();
        let mut r = vec![0.0; c.len()];
        self.net.species_rates_into(&c, &k, &mut r);
        Ok((0..c.len())
            .map(|i| {
                let (gi, e) = if i < g.len() { (g[i], self.zone.voidage) } else { (0.0, 1.0) };
                (dc[i] - (gi + r[i]) / e) / self.scaling.species[i]
            })
            .collect())
    }

    /// Loss components over `samples`.
    pub fn total_loss(&self, theta: &[f64], samples: &[PulseSamples], alpha: f64, beta: f64) -> Result<LossTerms> {
        self.check_params(theta)?;
        Ok(self.accumulate(theta, samples, alpha, beta, None))
    }

    /// Loss components and the exact gradient with respect to all parameters.
    pub fn loss_gradient(
        &self,
        theta: &[f64],
        samples: &[PulseSamples],
        alpha: f64,
        beta: f64,
        grad: &mut [f64],
    ) -> Result<LossTerms> {
        self.check_params(theta)?;
        if grad.len() != theta.len() {
            return Err(Error::Dimension(format!("gradient buffer {} for {} parameters", grad.len(), theta.len())));
        }
        grad.fill(0.0);
        Ok(self.accumulate(theta, samples, alpha, beta, Some(grad)))
    }

    fn accumulate(
        &self,
        theta: &[f64],
        samples: &[PulseSamples],
        alpha: f64,
        beta: f64,
        mut grad: Option<&mut [f64]>,
    ) -> LossTerms {
        let net = self.net;
        let n = net.n_species();
        let n_gas = net.n_gas();
        let nw = self.n_weights();
        let (w, raw) = theta.split_at(nw);
        let k: Vec<f64> = raw.iter().map(|v| v.abs()).collect();
        let s = &self.scaling.species;
        let e = self.zone.voidage;
        let practical = self.mode == Mode::Practical;
        let emat = net.element_matrix();
        let n_elem = emat.len();
        let u_scale = self.scaling.uptake;
        let mut sc = self.scratch();
        let mut terms = LossTerms::default();

        for pulse in samples {
            for j in 0..pulse.len() {
                let t = pulse.times[j];
                self.fill_features(t, &pulse.moments, &mut sc.x);
                self.mlp.forward_unchecked(w, &sc.x, &mut sc.tape);
                let y = sc.tape.output();
                let yd = sc.tape.output_tangent();
                sc.ybar.fill(0.0);
                sc.ydbar.fill(0.0);

                for i in 0..n {
                    if self.observed[i] {
                        let d = y[i] - pulse.targets[i][j];
                        terms.j_data += d * d;
                        sc.ybar[i] += 2.0 * d;
                    }
                    sc.c[i] = s[i] * y[i];
                }

                net.species_rates_into(&sc.c, &k, &mut sc.r);
                for i in 0..n {
                    let (gi, ei) = if i < n_gas { (pulse.net_flux[i][j], e) } else { (0.0, 1.0) };
                    let eps = yd[i] / t - (gi + sc.r[i]) / (ei * s[i]);
                    terms.j_model += eps * eps;
                    sc.ydbar[i] += 2.0 * alpha * eps / t;
                    sc.lambda[i] = 2.0 * alpha * eps / (ei * s[i]);
                }

                if practical {
                    for el in 0..n_elem {
                        let mut u = 0.0;
                        for i in n_gas..n {
                            u += emat[el][i] * sc.c[i];
                        }
                        let eps = (u - pulse.uptake[el][j]) / u_scale;
                        terms.j_uptake += eps * eps;
                        let wgt = 2.0 * beta * eps / u_scale;
                        for i in n_gas..n {
                            sc.ybar[i] += wgt * emat[el][i] * s[i];
                        }
                    }
                    if self.site_balance {
                        let sites = net.site_counts();
                        let mut occupied = 0.0;
                        for i in n_gas..n {
                            occupied += sites[i] as f64 * sc.c[i];
                        }
                        let eps = (occupied - self.zone.site_density) / u_scale;
                        terms.j_uptake += eps * eps;
                        let wgt = 2.0 * beta * eps / u_scale;
                        for i in n_gas..n {
                            sc.ybar[i] += wgt * sites[i] as f64 * s[i];
                        }
                    }
                }

                if let Some(g) = grad.as_deref_mut() {
                    if alpha != 0.0 {
                        net.species_rate_jacobian_into(&sc.c, &k, &mut sc.jac);
                        for l in 0..n {
                            let mut acc = 0.0;
                            for i in 0..n {
                                acc += sc.lambda[i] * sc.jac[i * n + l];
                            }
                            sc.ybar[l] -= acc * s[l];
                        }
                        net.psi_into(&sc.c, &mut sc.psi);
                        for (jr, gk) in g[nw..].iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for i in 0..n {
                                acc += sc.lambda[i] * net.stoich(i, jr) as f64;
                            }
                            let sign = if raw[jr] < 0.0 { -1.0 } else { 1.0 };
                            *gk -= acc * sc.psi[jr] * sign;
                        }
                    }
                    self.mlp.backward(w, &mut sc.tape, &sc.ybar, &sc.ydbar, &mut g[..nw]);
                }
            }
        }
        terms.total = terms.j_data + alpha * terms.j_model + beta * terms.j_uptake;
        terms
    }

    /// Network predictions in physical units for a pulse with the given moments.
    pub fn predict_pulse(&self, theta: &[f64], moments: &[f64], times: &[f64]) -> Result<Trajectory> {
        self.check_params(theta)?;
        let n = self.net.n_species();
        let mut conc = vec![Vec::with_capacity(times.len()); n];
        let mut rate = vec![Vec::with_capacity(times.len()); n];
        let mut tape = self.mlp.tape();
        for &t in times {
            let x = self.features(t, moments)?;
            self.mlp.forward_unchecked(&theta[..self.n_weights()], &x, &mut tape);
            for i in 0..n {
                let s = self.scaling.species[i];
                conc[i].push(s * tape.output()[i]);
                rate[i].push(s * tape.output_tangent()[i] / t);
            }
        }
        Ok(Trajectory { times: times.to_vec(), conc, rate })
    }

    /// Scaled network derivative and scaled right-hand side of the thin-zone
    /// balance at every sample, `[species][(pulse, sample)]`.
    pub fn rate_parity(&self, theta: &[f64], samples: &[PulseSamples]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.check_params(theta)?;
        let n = self.net.n_species();
        let n_gas = self.net.n_gas();
        let k: Vec<f64> = theta[self.n_weights()..].iter().map(|v| v.abs()).collect();
        let mut lhs = vec![Vec::new(); n];
        let mut rhs = vec![Vec::new(); n];
        let mut r = vec![0.0; n];
        for p in samples {
            let traj = self.predict_pulse(theta, &p.moments, &p.times)?;
            for j in 0..p.len() {
                let c: Vec<f64> = (0..n).map(|i| traj.conc[i][j]).collect();
                self.net.species_rates_into(&c, &k, &mut r);
                for i in 0..n {
                    let s = self.scaling.species[i];
                    let model = if i < n_gas { (p.net_flux[i][j] + r[i]) / self.zone.voidage } else { r[i] };
                    lhs[i].push(traj.rate[i][j] / s);
                    rhs[i].push(model / s);
                }
            }
        }
        Ok((lhs, rhs))
    }
}
