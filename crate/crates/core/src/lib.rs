//! Graph continual learning as a two-player game between feature/weight
//! perturbations and weight updates, plus the diagnostics that check it.

pub mod autodiff;
pub mod canonical;
pub mod gnn;
pub mod graph;
pub mod game;
pub mod metrics;
pub mod replay;
pub mod pipeline;
pub mod plot;
pub mod diagnostics;
pub mod hpo;
pub mod testkit;
