//! Kinetics-informed neural network: an MLP of log-time (and, for pulse
//! trains, scaled zeroth moments) whose outputs are scaled concentrations,
//! trained jointly with the rate constants against data, thin-zone balance
//! and element-uptake residuals.

mod mlp;
mod model;
mod params;
mod train;

pub use mlp::{Activation, Mlp, Tape};
pub use model::{KinnModel, LossTerms, Trajectory};
pub use params::{KinnParameters, FORMAT_VERSION};
pub use train::{initial_parameters, train, Adam, LossRecord, Schedule, Stage, TrainOutcome};
