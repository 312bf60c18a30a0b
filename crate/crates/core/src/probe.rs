//! Probe-light quantum noise and balanced-polarimeter readout.
//!
//! Models the polarization state of the probe beam in Stokes space: the mean
//! component `S1` carries the signal, while fluctuations of `S2` (detected by
//! the polarimeter) and `S3` (felt by the atoms as back-action) are white
//! Gaussian streams whose levels scale linearly with probe power. Squeezed
//! probes trade reduced `S2` noise for enhanced `S3` noise and vice versa;
//! optical loss pulls both factors back toward the coherent-state value.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest polarimeter rotation angle (rad) accepted as "small-angle".
///
/// The linearized readout `v = gain * (G_F * F_z * S1 + S2)` is valid only
/// while the Faraday rotation stays well below a radian; beyond this bound
/// the transduction model would silently distort spectra.
pub const SMALL_ANGLE_LIMIT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ReadoutError {
    #[error("invalid probe or detector setup: {0}")]
    Config(String),
    #[error(
        "small-angle approximation violated: max |G_F * F_z| = {max_phi:.4} rad \
         exceeds the {SMALL_ANGLE_LIMIT} rad limit"
    )]
    SmallAngleViolation { max_phi: f64 },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

/// Polarization class of the probe beam.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    /// Shot-noise-limited: both quadrature factors are exactly 1.
    Coherent,
    /// Detected `S2` noise reduced (`xi2 < 1`), conjugate `S3` enhanced.
    Squeezed,
    /// Roles exchanged: detected `S2` noise enhanced (`xi2 > 1`).
    Antisqueezed,
}

impl ProbeKind {
    pub fn label(self) -> &'static str {
        match self {
            ProbeKind::Coherent => "coherent",
            ProbeKind::Squeezed => "squeezed",
            ProbeKind::Antisqueezed => "antisqueezed",
        }
    }
}

/// Quantum-noise state of the probe beam.
///
/// `xi2` multiplies the detected `S2` noise power and `xibar2` the conjugate
/// `S3` noise power, both relative to the shot-noise (coherent) level.
/// `loss_eta` is the optical power transmission between the squeezing source
/// and the detector; [`apply_loss`] propagates the factors through it.
/// `kappa` is the shot-noise constant: the single-sided `S2`/`S3` fluctuation
/// PSD of a coherent probe per unit probe power, in detector-input units
/// squared per Hz per mW.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeState {
    pub kind: ProbeKind,
    pub xi2: f64,
    pub xibar2: f64,
    pub loss_eta: f64,
    pub kappa: f64,
}

impl ProbeState {
    pub fn coherent(kappa: f64) -> Self {
        ProbeState { kind: ProbeKind::Coherent, xi2: 1.0, xibar2: 1.0, loss_eta: 1.0, kappa }
    }

    pub fn squeezed(xi2: f64, xibar2: f64, kappa: f64) -> Self {
        ProbeState { kind: ProbeKind::Squeezed, xi2, xibar2, loss_eta: 1.0, kappa }
    }

    pub fn antisqueezed(xi2: f64, xibar2: f64, kappa: f64) -> Self {
        ProbeState { kind: ProbeKind::Antisqueezed, xi2, xibar2, loss_eta: 1.0, kappa }
    }

    /// Checks the quadrature factors against the uncertainty relation and the
    /// ordering implied by `kind`.
    pub fn validate(&self) -> Result<(), ReadoutError> {
        let err = |msg: String| Err(ReadoutError::Config(msg));
        if !(self.xi2.is_finite() && self.xi2 > 0.0) {
            return err(format!("xi2 must be finite and positive, got {}", self.xi2));
        }
        if !(self.xibar2.is_finite() && self.xibar2 > 0.0) {
            return err(format!("xibar2 must be finite and positive, got {}", self.xibar2));
        }
        if !(self.loss_eta > 0.0 && self.loss_eta <= 1.0) {
            return err(format!("loss_eta must lie in (0, 1], got {}", self.loss_eta));
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return err(format!("kappa must be finite and non-negative, got {}", self.kappa));
        }
        match self.kind {
            ProbeKind::Coherent => {
                if self.xi2 != 1.0 || self.xibar2 != 1.0 {
                    return err(format!(
                        "coherent probe requires xi2 = xibar2 = 1, got ({}, {})",
                        self.xi2, self.xibar2
                    ));
                }
            }
            ProbeKind::Squeezed => {
                if !(self.xi2 < 1.0 && self.xibar2 >= 1.0) {
                    return err(format!(
                        "squeezed probe requires xi2 < 1 <= xibar2, got ({}, {})",
                        self.xi2, self.xibar2
                    ));
                }
            }
            ProbeKind::Antisqueezed => {
                if !(self.xi2 > 1.0 && self.xibar2 <= 1.0) {
                    return err(format!(
                        "antisqueezed probe requires xi2 > 1 >= xibar2, got ({}, {})",
                        self.xi2, self.xibar2
                    ));
                }
            }
        }
        if self.xi2 * self.xibar2 < 1.0 - 1e-12 {
            return err(format!(
                "uncertainty relation violated: xi2 * xibar2 = {} < 1",
                self.xi2 * self.xibar2
            ));
        }
        Ok(())
    }

    /// The state actually seen by the detector: source factors propagated
    /// through the configured transmission `loss_eta`.
    pub fn detected(&self) -> ProbeState {
        apply_loss(self, self.loss_eta)
    }
}

/// Mean and fluctuating Stokes components of the probe at one sample instant.
///
/// `s2_noise` is the fluctuation added to the detected polarization-rotation
/// signal; `s3_noise` is the ellipticity fluctuation that torques the spins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StokesSample {
    /// Mean probe Stokes component along the polarimeter axis (∝ probe power).
    pub s1: f64,
    pub s2_noise: f64,
    pub s3_noise: f64,
}

/// Balanced-polarimeter transduction constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Output scale, µV per (rad · mW) of rotation-weighted probe signal.
    pub gain: f64,
    /// Faraday-rotation transduction, rad per unit of spin projection `F_z`.
    pub g_f: f64,
    /// Readout sampling rate in Hz.
    pub sample_rate: f64,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), ReadoutError> {
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return Err(ReadoutError::Config(format!(
                "detector gain must be finite and positive, got {}",
                self.gain
            )));
        }
        if !(self.g_f.is_finite() && self.g_f > 0.0) {
            return Err(ReadoutError::Config(format!(
                "detector g_f must be finite and positive, got {}",
                self.g_f
            )));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(ReadoutError::Config(format!(
                "detector sample_rate must be finite and positive, got {}",
                self.sample_rate
            )));
        }
        Ok(())
    }

    /// Single-sample voltage out of the polarimeter (µV):
    /// `v = gain * (G_F * F_z * S1 + S2_noise)`.
    #[inline]
    pub fn transduce(&self, f_z: f64, s1: f64, s2_noise: f64) -> f64 {
        self.gain * (self.g_f * f_z * s1 + s2_noise)
    }
}

/// Per-sample standard deviations of the discrete `S2` and `S3` noise streams
/// for a probe of power `p_pr_mw` sampled at `f_s`.
///
/// The streams are white with single-sided PSDs `xi2 * kappa * P` and
/// `xibar2 * kappa * P`; a discrete sample therefore has variance
/// `PSD * f_s / 2`.
pub fn stokes_noise_sigmas(probe: &ProbeState, p_pr_mw: f64, f_s: f64) -> (f64, f64) {
    let var_s2 = probe.xi2 * probe.kappa * p_pr_mw * f_s / 2.0;
    let var_s3 = probe.xibar2 * probe.kappa * p_pr_mw * f_s / 2.0;
    (var_s2.sqrt(), var_s3.sqrt())
}

/// Draws `n` samples of the white `S2` and `S3` fluctuation streams.
///
/// The two streams are independent Gaussians with single-sided PSDs
/// `xi2 * kappa * P_pr` and `xibar2 * kappa * P_pr`. Zero probe power (or
/// `kappa = 0`) yields all-zero streams.
pub fn sample_probe_noise(
    probe: &ProbeState,
    p_pr_mw: f64,
    f_s: f64,
    n: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>), ReadoutError> {
    probe.validate()?;
    if !(p_pr_mw.is_finite() && p_pr_mw >= 0.0) {
        return Err(ReadoutError::Config(format!(
            "probe power must be finite and non-negative, got {p_pr_mw}"
        )));
    }
    if !(f_s.is_finite() && f_s > 0.0) {
        return Err(ReadoutError::Config(format!(
            "sample rate must be finite and positive, got {f_s}"
        )));
    }
    let (sig2, sig3) = stokes_noise_sigmas(probe, p_pr_mw, f_s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s2 = Vec::with_capacity(n);
    let mut s3 = Vec::with_capacity(n);
    for _ in 0..n {
        let z2: f64 = rng.sample(StandardNormal);
        let z3: f64 = rng.sample(StandardNormal);
        s2.push(sig2 * z2);
        s3.push(sig3 * z3);
    }
    Ok((s2, s3))
}

/// Propagates squeezing factors through optical power transmission `eta`:
/// `xi'^2 = eta * xi^2 + (1 - eta)`, applied to both quadratures.
///
/// Loss mixes in vacuum, so both factors move toward 1 and the uncertainty
/// product never drops below 1. The returned state has `loss_eta = 1` (the
/// loss has been consumed).
pub fn apply_loss(probe: &ProbeState, eta: f64) -> ProbeState {
    assert!(
        eta > 0.0 && eta <= 1.0 && eta.is_finite(),
        "transmission eta must lie in (0, 1], got {eta}"
    );
    ProbeState {
        kind: probe.kind,
        xi2: eta * probe.xi2 + (1.0 - eta),
        xibar2: eta * probe.xibar2 + (1.0 - eta),
        loss_eta: 1.0,
        kappa: probe.kappa,
    }
}

/// Converts a spin-projection series plus probe samples into the detected
/// polarimeter voltage series (µV), enforcing the small-angle regime.
pub fn polarimeter_readout(
    f_z: &[f64],
    samples: &[StokesSample],
    det: &DetectorConfig,
) -> Result<Vec<f64>, ReadoutError> {
    det.validate()?;
    if f_z.len() != samples.len() {
        return Err(ReadoutError::LengthMismatch(format!(
            "f_z has {} samples but the probe stream has {}",
            f_z.len(),
            samples.len()
        )));
    }
    let mut max_phi = 0.0_f64;
    for &fz in f_z {
        max_phi = max_phi.max((det.g_f * fz).abs());
    }
    if max_phi >= SMALL_ANGLE_LIMIT {
        return Err(ReadoutError::SmallAngleViolation { max_phi });
    }
    Ok(f_z
        .iter()
        .zip(samples)
        .map(|(&fz, s)| det.transduce(fz, s.s1, s.s2_noise))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(x: &[f64]) -> f64 {
        x.iter().sum::<f64>() / x.len() as f64
    }

    fn variance(x: &[f64]) -> f64 {
        let m = mean(x);
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
    }

    #[test]
    fn coherent_unit_kappa_streams_have_unit_psd() {
        // White stream with single-sided PSD S sampled at f_s has variance
        // S * f_s / 2; with kappa = 1, P = 1 mW, f_s = 2 Hz both variances
        // should be 1 within statistics.
        let probe = ProbeState::coherent(1.0);
        let (s2, s3) = sample_probe_noise(&probe, 1.0, 2.0, 1_000_000, 7).unwrap();
        let v2 = variance(&s2);
        let v3 = variance(&s3);
        assert!((v2 - 1.0).abs() < 0.03, "S2 PSD off: {v2}");
        assert!((v3 - 1.0).abs() < 0.03, "S3 PSD off: {v3}");
    }

    #[test]
    fn squeezing_factors_scale_stream_powers() {
        let probe = ProbeState::squeezed(0.5, 2.0, 1.0);
        let (s2, s3) = sample_probe_noise(&probe, 1.0, 2.0, 500_000, 11).unwrap();
        assert!((variance(&s2) - 0.5).abs() < 0.02);
        assert!((variance(&s3) - 2.0).abs() < 0.06);
    }

    #[test]
    fn zero_power_gives_zero_streams() {
        let probe = ProbeState::coherent(1.0);
        let (s2, s3) = sample_probe_noise(&probe, 0.0, 2.0, 64, 3).unwrap();
        assert!(s2.iter().all(|&v| v == 0.0));
        assert!(s3.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn probe_noise_is_seed_deterministic() {
        let probe = ProbeState::coherent(1.0);
        let a = sample_probe_noise(&probe, 1.0, 2.0, 256, 99).unwrap();
        let b = sample_probe_noise(&probe, 1.0, 2.0, 256, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_interpolates_toward_vacuum() {
        // A 2.0 dB squeezed quadrature (xi2 = 0.631) observed as 1.8 dB
        // (xi2 = 0.661) implies eta = (1 - 0.661) / (1 - 0.631) ~ 0.919.
        let before = ProbeState::squeezed(0.631, 1.0 / 0.631, 1.0);
        let eta = (1.0 - 0.661_f64) / (1.0 - 0.631_f64);
        let after = apply_loss(&before, eta);
        assert!((after.xi2 - 0.661).abs() < 1e-12, "xi2 after loss: {}", after.xi2);
        assert!(after.xibar2 < before.xibar2 && after.xibar2 > 1.0);
        after.validate().unwrap();
    }

    #[test]
    fn full_transmission_is_identity() {
        let probe = ProbeState::squeezed(0.76, 1.85, 1.0);
        let after = apply_loss(&probe, 1.0);
        assert_eq!(after.xi2, probe.xi2);
        assert_eq!(after.xibar2, probe.xibar2);
    }

    #[test]
    fn loss_is_symmetric_under_quadrature_swap() {
        let probe = ProbeState::squeezed(0.5, 2.0, 1.0);
        let swapped = ProbeState::antisqueezed(2.0, 0.5, 1.0);
        let a = apply_loss(&probe, 0.7);
        let b = apply_loss(&swapped, 0.7);
        assert_eq!(a.xi2, b.xibar2);
        assert_eq!(a.xibar2, b.xi2);
    }

    #[test]
    fn polarimeter_applies_gain_and_offset() {
        let det = DetectorConfig { gain: 2.0, g_f: 0.01, sample_rate: 1.0e6 };
        let f_z = vec![1.0, -1.0, 0.0];
        let samples: Vec<StokesSample> = [0.1, 0.0, -0.2]
            .iter()
            .map(|&n| StokesSample { s1: 3.0, s2_noise: n, s3_noise: 0.0 })
            .collect();
        let v = polarimeter_readout(&f_z, &samples, &det).unwrap();
        // v = gain * (g_f * f_z * s1 + s2) = 2 * (0.03 * f_z + s2)
        assert!((v[0] - 2.0 * (0.03 + 0.1)).abs() < 1e-15);
        assert!((v[1] - 2.0 * (-0.03)).abs() < 1e-15);
        assert!((v[2] - 2.0 * (-0.2)).abs() < 1e-15);
    }

    #[test]
    fn large_rotation_is_rejected() {
        let det = DetectorConfig { gain: 1.0, g_f: 0.01, sample_rate: 1.0e6 };
        let f_z = vec![0.0, 20.0]; // phi = 0.2 rad > limit
        let samples = vec![StokesSample { s1: 1.0, s2_noise: 0.0, s3_noise: 0.0 }; 2];
        match polarimeter_readout(&f_z, &samples, &det) {
            Err(ReadoutError::SmallAngleViolation { max_phi }) => {
                assert!((max_phi - 0.2).abs() < 1e-12)
            }
            other => panic!("expected SmallAngleViolation, got {other:?}"),
        }
    }

    #[test]
    fn probe_state_invariants_are_enforced() {
        assert!(ProbeState::coherent(1.0).validate().is_ok());
        assert!(ProbeState::squeezed(0.76, 1.85, 1.0).validate().is_ok());
        assert!(ProbeState::antisqueezed(1.85, 0.76, 1.0).validate().is_ok());
        // Uncertainty violation: product < 1.
        assert!(ProbeState::squeezed(0.5, 1.0, 1.0).validate().is_err());
        // Wrong ordering for the declared kind.
        assert!(ProbeState::squeezed(1.2, 1.2, 1.0).validate().is_err());
        let mut bad = ProbeState::coherent(1.0);
        bad.xi2 = 0.9;
        assert!(bad.validate().is_err());
    }
}
