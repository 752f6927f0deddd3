//! Forward models, Monte-Carlo simulators and statistical estimators for
//! repetitive optical readout of a nuclear spin qubit coupled to an
//! S = 3/2 electron spin.
//!
//! The crate is organised by subsystem:
//!
//! - [`spin`]: electron-nuclear spin Hamiltonian, level labelling and
//!   transition frequencies.
//! - [`readout`]: single-sided repetitive readout. Exact photon-count
//!   distributions, Monte-Carlo sampling, maximum-likelihood rate fitting and
//!   fidelity versus success-rate analysis.
//! - [`alt`]: alternating two-sided readout built on signed count differences.
//! - [`trajectory`]: continuous-time quantum-jump traces, HMM filtering and
//!   smoothing, dwell-time rate estimation.
//! - [`dynamics`]: Rabi, Ramsey and ENDOR signal models with peak matching.
//! - [`config`] and [`io`]: JSON experiment configuration and CSV formats.

pub mod alt;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod optim;
pub mod poisson;
pub mod readout;
pub mod rng;
pub mod spin;
pub mod trajectory;

pub use error::{Error, Result};
