//! Nonlinear MPC with terminal ingredients, simulated against a mismatched
//! plant, with sampled certificates of robust versus strong stability.

pub mod closedloop;
pub mod compfn;
pub mod error;
pub mod linalg;
pub mod model;
pub mod ocp;
pub mod terminal;

pub use error::{Error, Result};
