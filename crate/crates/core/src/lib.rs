//! Desk-scale simulator and analysis toolkit for quantum-noise scaling in a
//! continuously monitored spin-precession magnetometer.
//!
//! The crate models an optically pumped atomic ensemble read out by a
//! far-detuned probe: a stochastic Bloch equation drives the collective spin,
//! a polarimeter converts spin projection plus optical shot noise into a
//! voltage, and a lock-in/Welch/maximum-likelihood chain turns long voltage
//! records into calibrated noise spectra, fitted noise budgets, and power
//! scaling laws.
//!
//! Modules follow the physical signal path:
//!
//! - [`vec3`]: minimal 3-vector used by the integrator.
//! - [`sde`]: stochastic Bloch dynamics (Larmor precession, pumping,
//!   relaxation, atomic and probe-induced Langevin forcing, probe back-action
//!   torque).
//! - [`probe`]: probe polarization states, optical loss, Stokes noise
//!   streams, and the polarimeter transduction.
//! - [`dsp`]: lock-in demodulation, decimation, Welch spectra, masking, and
//!   spectrum serialization.

pub mod config;
pub mod dsp;
pub mod fit;
pub mod probe;
pub mod report;
pub mod sde;
pub mod scaling;
pub mod selftest;
pub mod store;
pub mod vec3;
