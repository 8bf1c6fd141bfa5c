//! Simulation core for a liquid-level process-control rig.
//!
//! The tank, valve and pressure transmitter live in [`plant`], the feedback
//! laws in [`control`], and [`engine`] wires them into one sampled loop.
//! [`tuning`] runs the ultimate-gain experiment, [`scenario`] scripts
//! experiments and scores their transients.

pub mod control;
pub mod engine;
pub mod integrate;
pub mod plant;
pub mod presets;
pub mod scenario;
pub mod series;
pub mod tuning;
