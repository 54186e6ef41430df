use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_pipeline::PulseSamples;
use crate::error::{Error, Result};

use super::model::{KinnModel, LossTerms};
use super::params::KinnParameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub stages: Vec<Stage>,
    pub iterations_per_epoch: usize,
    pub step_size: f64,
    pub init_scale_weights: f64,
    pub init_scale_kinetic: f64,
    pub seed: u64,
    /// Iterations between loss-trajectory records.
    pub log_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            stages: Schedule::ladder(1e-10, 1.0, 0.0, 5),
            iterations_per_epoch: 1000,
            step_size: 1e-3,
            init_scale_weights: 1e-2,
            init_scale_kinetic: 1e-5,
            seed: 0,
            log_every: 100,
        }
    }
}

impl Schedule {
    /// α multiplied by ten per stage from `alpha_start` to `alpha_end`, with a constant β.
    pub fn ladder(alpha_start: f64, alpha_end: f64, beta: f64, epochs: usize) -> Vec<Stage> {
        let n = (alpha_end / alpha_start).log10().round().max(0.0) as i32;
        (0..=n).map(|i| Stage { alpha: alpha_start * 10f64.powi(i), beta, epochs }).collect()
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.epochs * self.iterations_per_epoch).sum()
    }

    pub fn final_weights(&self) -> (f64, f64) {
        self.stages.last().map_or((0.0, 0.0), |s| (s.alpha, s.beta))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("kinn.schedule.stages", "at least one stage is required"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.alpha >= 0.0 && s.alpha.is_finite() && s.beta >= 0.0 && s.beta.is_finite()) {
                return Err(Error::config("kinn.schedule.stages", format!("stage {i}: α and β must be finite and ≥ 0")));
            }
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("kinn.schedule.step_size", "must be positive"));
        }
        if self.iterations_per_epoch == 0 || self.log_every == 0 {
            return Err(Error::config("kinn.schedule", "iterations_per_epoch and log_every must be positive"));
        }
        if !(self.init_scale_weights >= 0.0 && self.init_scale_kinetic >= 0.0) {
            return Err(Error::config("kinn.schedule", "initialisation scales must be ≥ 0"));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, step_size: f64) -> Self {
        Adam { step_size, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            theta[i] -= self.step_size * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One row of the loss trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub stage: usize,
    pub iteration: usize,
    pub alpha: f64,
    pub beta: f64,
    pub terms: LossTerms,
    /// Rate constants at this point.
    pub k: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: KinnParameters,
    /// Loss at the returned parameters under the last stage's (α, β).
    pub final_terms: LossTerms,
    pub alpha: f64,
    pub beta: f64,
    pub trajectory: Vec<LossRecord>,
    pub wall_time: Duration,
}

/// Initial parameters: uniform weights in `±init_scale_weights`, zero
/// biases, every kinetic parameter at `init_scale_kinetic`.
pub fn initial_parameters(model: &KinnModel, schedule: &Schedule) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let sizes = model.mlp.sizes();
    let mut theta = Vec::with_capacity(model.n_params());
    for w in sizes.windows(2) {
        for _ in 0..w[0] * w[1] {
            let u: f64 = rng.random_range(-1.0..=1.0);
            theta.push(u * schedule.init_scale_weights);
        }
        theta.extend(std::iter::repeat_n(0.0, w[1]));
    }
    theta.extend(std::iter::repeat_n(schedule.init_scale_kinetic, model.net.n_reactions()));
    theta
}

/// Full-batch Adam over the staged (α, β) schedule.
pub fn train(model: &KinnModel, samples: &[PulseSamples], schedule: &Schedule) -> Result<TrainOutcome> {
    schedule.validate()?;
    if samples.iter().all(|s| s.is_empty()) {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    let start = Instant::now();
    let mut theta = initial_parameters(model, schedule);
    let mut grad = vec![0.0; theta.len()];
    let mut adam = Adam::new(theta.len(), schedule.step_size);
    let mut trajectory = Vec::new();
    let mut iteration = 0;
    for (si, stage) in schedule.stages.iter().enumerate() {
        let n_iter = stage.epochs * schedule.iterations_per_epoch;
        for it in 0..n_iter {
            let terms = model.loss_gradient(&theta, samples, stage.alpha, stage.beta, &mut grad)?;
            if !terms.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    stage: si,
                    iteration: it,
                    reason: format!("non-finite loss {terms:?}"),
                });
            }
            if iteration % schedule.log_every == 0 {
                let k = theta[model.n_weights()..].iter().map(|v| v.abs()).collect();
                trajectory.push(LossRecord { stage: si, iteration, alpha: stage.alpha, beta: stage.beta, terms, k });
            }
            adam.step(&mut theta, &grad);
            iteration += 1;
        }
        log::debug!("stage {si} (α = {:e}) done after {iteration} iterations", stage.alpha);
    }
    let (alpha, beta) = schedule.final_weights();
    let final_terms = model.total_loss(&theta, samples, alpha, beta)?;
    if !final_terms.is_finite() {
        return Err(Error::Divergence {
            stage: schedule.stages.len() - 1,
            iteration,
            reason: "non-finite final loss".into(),
        });
    }
    let params = KinnParameters::from_flat(model, &theta)?;
    trajectory.push(LossRecord {
        stage: schedule.stages.len() - 1,
        iteration,
        alpha,
        beta,
        terms: final_terms,
        k: params.rate_constants(),
    });
    Ok(TrainOutcome { params, final_terms, alpha, beta, trajectory, wall_time: start.elapsed() })
}
