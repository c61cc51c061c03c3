//! Scenario registry and experiment commands for the mismatch-mpc library.

pub mod commands;
pub mod config;
pub mod contour;
pub mod error;
pub mod output;
pub mod scenario;
pub mod svg;
