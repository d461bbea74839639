//! Desk-scale pipeline for learning coordinated volt/VAr control of a small
//! active distribution feeder: a quasi-static feeder simulator, inverse
//! dynamics dataset generation, self-attention / LSTM / dense controller
//! models on a reverse-mode autodiff core, and the closed-loop efficiency
//! experiment comparing trained controllers against fixed base controls.

pub mod autodiff;
pub mod cli;
pub mod closed_loop;
pub mod dataset;
pub mod feeder;
pub mod layers;
pub mod model;
pub mod trainer;
pub mod util;
