//! Simulation and estimation toolkit for the two-stage contact process on
//! `Z^d`, its two-stage SIR companion and the dominating linear system.
//!
//! Modules, bottom-up:
//!
//! * [`lattice`]: sites of `Z^d`, boxes and tori, neighbours;
//! * [`engine`]: exact event-driven simulators;
//! * [`graphical`]: the exponential-clock construction of the SIR model;
//! * [`meanfield`]: first-moment ODE of the linear system and the resulting
//!   lower bound on the critical rate;
//! * [`saw`]: the drifted self-avoiding walk and the second-moment bound;
//! * [`critical`]: survival estimation, bisection and dimension trends;
//! * [`oracle`]: exact transient laws of tiny chains and brute-force checks;
//! * [`cli`]: the `twostage` command-line front end.

pub mod cli;
pub mod critical;
pub mod engine;
pub mod error;
pub mod graphical;
pub mod lattice;
pub mod meanfield;
pub mod oracle;
pub mod rng;
pub mod saw;
pub mod stats;

pub use error::{Error, Result};
