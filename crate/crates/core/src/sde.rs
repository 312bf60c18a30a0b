//! Stochastic Bloch dynamics of the collective atomic spin.
//!
//! Integrates
//!
//! ```text
//! dF/dt = (-gamma*B(t) + G_S*S3(t)*z) x F - (Gamma0 + alpha*P_pr) F
//!         + R_OP(t) (F_max*z - F) + N_at(t) + N_pr(t)
//! ```
//!
//! with a stochastic Heun (predictor–corrector) scheme. The ellipticity
//! fluctuation `S3(t)` enters as piecewise-constant band-limited white noise
//! held over each step, which converges to the Stratonovich interpretation of
//! the multiplicative back-action torque. The additive Langevin pair
//! `N_at`/`N_pr` is calibrated so that, with pump and back-action off, each
//! spin component is an Ornstein–Uhlenbeck process with stationary variance
//! `sigma_f2` and Lorentzian half-width `(Gamma0 + alpha*P_pr) / 2pi`.

use crate::probe::{stokes_noise_sigmas, ProbeState, StokesSample};
use crate::vec3::Vec3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Strictest phase advance per step accepted by the integrator.
pub const MAX_PHASE_PER_STEP: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("invalid simulation setup: {0}")]
    Config(String),
    #[error("spin state became non-finite at t = {t:.6e} s")]
    NonFinite { t: f64 },
}

/// Static physical constants of the sensor cell and couplings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalParams {
    /// Gyromagnetic ratio, rad s^-1 T^-1.
    pub gamma: f64,
    /// Static field magnitude, T.
    pub b_dc: f64,
    /// Static field direction (normalized on validation); the default puts it
    /// in the x–z plane at 45 degrees to the pump–probe (z) axis.
    pub b_dc_direction: Vec3,
    /// Amplitude of the rf drive field along x, T.
    pub b_rf_amp: f64,
    /// Angular frequency of the rf drive, rad/s (phase-locked to the pump).
    pub omega_rf: f64,
    /// Intrinsic spin relaxation rate, s^-1.
    pub gamma0: f64,
    /// Probe-induced relaxation per unit probe power, s^-1 mW^-1.
    pub alpha: f64,
    /// Back-action coupling: torque rate around z per unit S3, rad s^-1.
    pub g_s: f64,
    /// Fully pumped spin magnitude (spin units).
    pub f_max: f64,
    /// Unpolarized per-component stationary spin variance (spin units^2).
    pub sigma_f2: f64,
}

impl Default for PhysicalParams {
    /// Calibrated reference cell: a 42 kHz precession line (6 uT at
    /// 7 GHz/T) held at 45 degrees between the static field and the
    /// pump–probe axis, 175 Hz intrinsic half-width, probe broadening
    /// 300 s^-1/mW, and unit unpolarized spin variance so detector constants
    /// set the absolute noise scale. The back-action coupling `g_s` is tuned
    /// so the back-action total at 3 mW probe / 10 uW pump with a coherent
    /// probe is ~8.6e3 uV^2 (cubic coefficient ~320 uV^2/mW^3).
    fn default() -> Self {
        let gamma = std::f64::consts::TAU * 7.0e9;
        PhysicalParams {
            gamma,
            b_dc: 6.0e-6,
            b_dc_direction: Vec3::new(1.0, 0.0, 1.0),
            b_rf_amp: 0.0,
            omega_rf: gamma * 6.0e-6,
            gamma0: 1100.0,
            alpha: 300.0,
            g_s: 2.535e5,
            f_max: 1000.0,
            sigma_f2: 1.0,
        }
    }
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<(), SdeError> {
        let err = |msg: String| Err(SdeError::Config(msg));
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return err(format!("gamma must be finite and positive, got {}", self.gamma));
        }
        if !(self.b_dc.is_finite() && self.b_dc >= 0.0) {
            return err(format!("b_dc must be finite and non-negative, got {}", self.b_dc));
        }
        if !self.b_dc_direction.is_finite() || self.b_dc_direction.norm() == 0.0 {
            return err("b_dc_direction must be a finite non-zero vector".into());
        }
        if !(self.b_rf_amp.is_finite() && self.b_rf_amp >= 0.0) {
            return err(format!("b_rf_amp must be finite and non-negative, got {}", self.b_rf_amp));
        }
        if !self.omega_rf.is_finite() {
            return err("omega_rf must be finite".into());
        }
        if !(self.gamma0.is_finite() && self.gamma0 > 0.0) {
            return err(format!("gamma0 must be finite and positive, got {}", self.gamma0));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return err(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if !self.g_s.is_finite() {
            return err("g_s must be finite".into());
        }
        if !(self.f_max.is_finite() && self.f_max > 0.0) {
            return err(format!("f_max must be finite and positive, got {}", self.f_max));
        }
        if !(self.sigma_f2.is_finite() && self.sigma_f2 > 0.0) {
            return err(format!("sigma_f2 must be finite and positive, got {}", self.sigma_f2));
        }
        Ok(())
    }

    /// Magnetic field at time `t`: static field plus the rf drive along x.
    #[inline]
    pub fn b_field_at(&self, t: f64, b_dir: Vec3) -> Vec3 {
        let mut b = b_dir * self.b_dc;
        if self.b_rf_amp != 0.0 {
            b.x += self.b_rf_amp * (self.omega_rf * t).cos();
        }
        b
    }
}

/// Periodic unit-amplitude shape of the optical pumping rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "shape")]
pub enum PumpWaveform {
    /// Raised-cosine pulse train: one pulse per pump period occupying the
    /// fraction `duty` of the period, peak value 1, zero in between.
    Pulsed { duty: f64 },
    /// `(1 + cos(theta)) / 2`: full-depth sinusoidal modulation.
    Sinusoidal,
    /// Constant unit rate (dc optical pumping; used for rate-equation checks).
    Constant,
}

impl PumpWaveform {
    /// Waveform value at pump phase `theta` (rad), in [0, 1].
    #[inline]
    pub fn value(&self, theta: f64) -> f64 {
        match *self {
            PumpWaveform::Pulsed { duty } => {
                let phase = theta.rem_euclid(std::f64::consts::TAU);
                let window = std::f64::consts::TAU * duty;
                if phase < window {
                    0.5 * (1.0 - (std::f64::consts::TAU * phase / window).cos())
                } else {
                    0.0
                }
            }
            PumpWaveform::Sinusoidal => 0.5 * (1.0 + theta.cos()),
            PumpWaveform::Constant => 1.0,
        }
    }

    /// Mean of the waveform over one period.
    pub fn mean(&self) -> f64 {
        match *self {
            PumpWaveform::Pulsed { duty } => 0.5 * duty,
            PumpWaveform::Sinusoidal => 0.5,
            PumpWaveform::Constant => 1.0,
        }
    }
}

/// Light-field drive settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveConfig {
    /// Pump power, µW.
    pub pump_power: f64,
    /// Probe power, mW.
    pub probe_power: f64,
    /// Pump modulation angular frequency, rad/s (resonant: ~ gamma * B_dc).
    pub omega_pump: f64,
    /// Peak optical pumping rate per unit pump power, s^-1 µW^-1.
    pub pump_rate_peak: f64,
    pub pump_waveform: PumpWaveform,
    /// When false the pump is blocked and `R_OP(t)` is identically zero.
    pub polarized: bool,
}

impl DriveConfig {
    pub fn validate(&self) -> Result<(), SdeError> {
        let err = |msg: String| Err(SdeError::Config(msg));
        if !(self.pump_power.is_finite() && self.pump_power >= 0.0) {
            return err(format!("pump_power must be finite and non-negative, got {}", self.pump_power));
        }
        if !(self.probe_power.is_finite() && self.probe_power >= 0.0) {
            return err(format!("probe_power must be finite and non-negative, got {}", self.probe_power));
        }
        if !(self.omega_pump.is_finite() && self.omega_pump >= 0.0) {
            return err(format!("omega_pump must be finite and non-negative, got {}", self.omega_pump));
        }
        if !(self.pump_rate_peak.is_finite() && self.pump_rate_peak >= 0.0) {
            return err(format!(
                "pump_rate_peak must be finite and non-negative, got {}",
                self.pump_rate_peak
            ));
        }
        if let PumpWaveform::Pulsed { duty } = self.pump_waveform {
            if !(duty > 0.0 && duty <= 1.0) {
                return err(format!("pump duty cycle must lie in (0, 1], got {duty}"));
            }
        }
        Ok(())
    }

    /// Optical pumping rate `R_OP(t)` (s^-1); identically zero when the run is
    /// unpolarized.
    #[inline]
    pub fn pump_rate_at(&self, t: f64) -> f64 {
        if !self.polarized {
            return 0.0;
        }
        self.pump_rate_peak * self.pump_power * self.pump_waveform.value(self.omega_pump * t)
    }
}

/// Collective spin vector at a time point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinState {
    pub f: Vec3,
    pub t: f64,
}

/// Grid settings for one stochastic trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    /// Integrator step, s.
    pub dt: f64,
    /// Recorded duration after burn-in, s.
    pub duration: f64,
    /// Discarded settling time, s (must cover several relaxation times).
    pub burn_in: f64,
    pub seed: u64,
}

impl TrajectoryConfig {
    pub fn validate(&self, params: &PhysicalParams) -> Result<(), SdeError> {
        let err = |msg: String| Err(SdeError::Config(msg));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return err(format!("dt must be finite and positive, got {}", self.dt));
        }
        let omega_l = larmor_frequency(params);
        if self.dt * omega_l > MAX_PHASE_PER_STEP * (1.0 + 1e-12) {
            return err(format!(
                "dt too coarse: dt * omega_L = {:.4} exceeds the {} rad/step limit",
                self.dt * omega_l,
                MAX_PHASE_PER_STEP
            ));
        }
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return err(format!("duration must be finite and non-negative, got {}", self.duration));
        }
        if !(self.burn_in.is_finite() && self.burn_in * params.gamma0 >= 5.0) {
            return err(format!(
                "burn_in must cover at least 5 relaxation times (>= {:.3e} s), got {:.3e} s",
                5.0 / params.gamma0,
                self.burn_in
            ));
        }
        Ok(())
    }
}

/// Integrated additive Langevin noise over one step, split into the
/// intrinsic-relaxation share and the probe-scattering share.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LangevinIncrement {
    pub atomic: Vec3,
    pub probe: Vec3,
}

/// Larmor angular frequency `gamma * B_dc`, rad/s.
pub fn larmor_frequency(params: &PhysicalParams) -> f64 {
    params.gamma * params.b_dc
}

/// Total transverse relaxation rate `Gamma0 + alpha * P_pr`, s^-1.
pub fn relaxation_rate(params: &PhysicalParams, probe_power_mw: f64) -> f64 {
    params.gamma0 + params.alpha * probe_power_mw
}

#[inline]
fn bloch_rhs(
    f: Vec3,
    t: f64,
    s3_noise: f64,
    params: &PhysicalParams,
    drive: &DriveConfig,
    b_dir: Vec3,
    gamma_tot: f64,
) -> Vec3 {
    let torque = params.b_field_at(t, b_dir) * (-params.gamma) + Vec3::Z * (params.g_s * s3_noise);
    let pump = drive.pump_rate_at(t);
    torque.cross(f) - f * (gamma_tot + pump) + Vec3::Z * (pump * params.f_max)
}

/// Advances the spin state by one step `dt` with the stochastic Heun scheme.
///
/// `s3_noise` is the band-limited ellipticity fluctuation sample held constant
/// over the step; `langevin` carries the pre-integrated additive noise. The
/// drift (including the `S3` torque) is evaluated at both the current state
/// and an Euler predictor, which makes the multiplicative term Stratonovich.
pub fn step(
    state: &SpinState,
    params: &PhysicalParams,
    drive: &DriveConfig,
    dt: f64,
    s3_noise: f64,
    langevin: &LangevinIncrement,
) -> Result<SpinState, SdeError> {
    let b_dir = params.b_dc_direction.normalized();
    let gamma_tot = relaxation_rate(params, drive.probe_power);
    let dn = langevin.atomic + langevin.probe;
    let k1 = bloch_rhs(state.f, state.t, s3_noise, params, drive, b_dir, gamma_tot);
    let predictor = state.f + k1 * dt + dn;
    let k2 = bloch_rhs(predictor, state.t + dt, s3_noise, params, drive, b_dir, gamma_tot);
    let f = state.f + (k1 + k2) * (0.5 * dt) + dn;
    if !f.is_finite() {
        return Err(SdeError::NonFinite { t: state.t + dt });
    }
    Ok(SpinState { f, t: state.t + dt })
}

/// Streaming trajectory integrator.
///
/// Owns the RNG and the calibrated per-step noise scales; emits one
/// `(SpinState, StokesSample)` pair per call to [`TrajectorySimulator::advance`].
/// The `S3` samples that torque the spin are the same realization reported in
/// the Stokes stream, and the `S2` samples are drawn from the post-loss
/// (detected) probe state while back-action uses the pre-loss state.
pub struct TrajectorySimulator {
    params: PhysicalParams,
    drive: DriveConfig,
    state: SpinState,
    dt: f64,
    sigma_atomic: f64,
    sigma_probe: f64,
    sigma_s2: f64,
    sigma_s3: f64,
    s1: f64,
    excursion_bound: f64,
    excursions: u64,
    rng: ChaCha8Rng,
}

impl TrajectorySimulator {
    pub fn new(
        params: &PhysicalParams,
        drive: &DriveConfig,
        probe: &ProbeState,
        traj: &TrajectoryConfig,
    ) -> Result<Self, SdeError> {
        params.validate()?;
        drive.validate()?;
        traj.validate(params)?;
        probe
            .validate()
            .map_err(|e| SdeError::Config(format!("probe state: {e}")))?;

        let dt = traj.dt;
        let f_s = 1.0 / dt;
        // Fluctuation–dissipation split: the white forcing that sustains the
        // unpolarized variance sigma_f2 against relaxation Gamma has
        // per-component increment variance 2 * Gamma * sigma_f2 * dt, divided
        // between the intrinsic (Gamma0) and probe (alpha * P_pr) channels.
        let sigma_atomic = (2.0 * params.gamma0 * params.sigma_f2 * dt).sqrt();
        let sigma_probe = (2.0 * params.alpha * drive.probe_power * params.sigma_f2 * dt).sqrt();
        // S2 is what the detector sees (after loss); S3 acts inside the cell
        // (before loss).
        let detected = probe.detected();
        let (sigma_s2, _) = stokes_noise_sigmas(&detected, drive.probe_power, f_s);
        let (_, sigma_s3) = stokes_noise_sigmas(probe, drive.probe_power, f_s);

        let mut rng = ChaCha8Rng::seed_from_u64(traj.seed);
        let sigma_f = params.sigma_f2.sqrt();
        let f0 = Vec3::new(
            sigma_f * rng.sample::<f64, _>(StandardNormal),
            sigma_f * rng.sample::<f64, _>(StandardNormal),
            sigma_f * rng.sample::<f64, _>(StandardNormal),
        );

        Ok(TrajectorySimulator {
            params: params.clone(),
            drive: drive.clone(),
            state: SpinState { f: f0, t: 0.0 },
            dt,
            sigma_atomic,
            sigma_probe,
            sigma_s2,
            sigma_s3,
            s1: drive.probe_power,
            excursion_bound: params.f_max + 6.0 * (3.0 * params.sigma_f2).sqrt(),
            excursions: 0,
            rng,
        })
    }

    pub fn state(&self) -> &SpinState {
        &self.state
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of steps so far on which |F| exceeded the soft bound
    /// `F_max + 6 * sqrt(3 * sigma_f2)`.
    pub fn excursion_count(&self) -> u64 {
        self.excursions
    }

    /// Draws the per-step noise, advances one step, and returns the new state
    /// together with the Stokes sample that acted during the step.
    pub fn advance(&mut self) -> Result<(SpinState, StokesSample), SdeError> {
        // Fixed draw order keeps trajectories bit-reproducible per seed.
        let mut draw = |sigma: f64| -> f64 {
            let z: f64 = self.rng.sample(StandardNormal);
            sigma * z
        };
        let langevin = LangevinIncrement {
            atomic: Vec3::new(
                draw(self.sigma_atomic),
                draw(self.sigma_atomic),
                draw(self.sigma_atomic),
            ),
            probe: Vec3::new(draw(self.sigma_probe), draw(self.sigma_probe), draw(self.sigma_probe)),
        };
        let s2_noise = draw(self.sigma_s2);
        let s3_noise = draw(self.sigma_s3);

        let next = step(&self.state, &self.params, &self.drive, self.dt, s3_noise, &langevin)?;
        self.state = next;
        if next.f.norm() > self.excursion_bound {
            self.excursions += 1;
        }
        Ok((next, StokesSample { s1: self.s1, s2_noise, s3_noise }))
    }

    /// Runs (and discards) `burn_in` seconds of dynamics.
    pub fn run_burn_in(&mut self, burn_in: f64) -> Result<(), SdeError> {
        let n = (burn_in / self.dt).round() as u64;
        for _ in 0..n {
            self.advance()?;
        }
        Ok(())
    }
}

/// Integrates a full trajectory and materializes the sampled states and
/// Stokes stream after burn-in.
///
/// Samples are uniform with spacing `traj.dt`; the `S3` entries are exactly
/// the fluctuations that torqued the spin during the corresponding steps, so
/// a later readout stage sees a self-consistent back-action record.
pub fn simulate_trajectory(
    params: &PhysicalParams,
    drive: &DriveConfig,
    probe: &ProbeState,
    traj: &TrajectoryConfig,
) -> Result<Vec<(SpinState, StokesSample)>, SdeError> {
    let mut sim = TrajectorySimulator::new(params, drive, probe, traj)?;
    sim.run_burn_in(traj.burn_in)?;
    let n = (traj.duration / traj.dt).round() as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(sim.advance()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_params() -> PhysicalParams {
        PhysicalParams {
            gamma: 4.0e10,
            b_dc: 0.0,
            b_dc_direction: Vec3::new(1.0, 0.0, 1.0),
            b_rf_amp: 0.0,
            omega_rf: 0.0,
            gamma0: 1.0,
            alpha: 0.0,
            g_s: 0.0,
            f_max: 1000.0,
            sigma_f2: 1.0,
        }
    }

    fn quiet_drive() -> DriveConfig {
        DriveConfig {
            pump_power: 0.0,
            probe_power: 0.0,
            omega_pump: 0.0,
            pump_rate_peak: 0.0,
            pump_waveform: PumpWaveform::Pulsed { duty: 0.2 },
            polarized: false,
        }
    }

    const NO_NOISE: LangevinIncrement =
        LangevinIncrement { atomic: Vec3::ZERO, probe: Vec3::ZERO };

    #[test]
    fn pure_precession_quarter_cycle() {
        // B along z, no relaxation: F(0) = F_max x should precess to
        // -F_max y after a quarter Larmor cycle (right-hand torque for -gamma B x F).
        let mut params = quiet_params();
        params.b_dc = 6.0e-6;
        params.b_dc_direction = Vec3::Z;
        params.gamma0 = 1e-12; // negligible relaxation, keeps validation happy elsewhere
        let drive = quiet_drive();
        let omega_l = larmor_frequency(&params);
        let n = 400;
        let dt = std::f64::consts::PI / (2.0 * omega_l) / n as f64;
        let mut state = SpinState { f: Vec3::new(params.f_max, 0.0, 0.0), t: 0.0 };
        for _ in 0..n {
            state = step(&state, &params, &drive, dt, 0.0, &NO_NOISE).unwrap();
        }
        let target = Vec3::new(0.0, -params.f_max, 0.0);
        let miss = (state.f - target).norm();
        assert!(miss < 1e-4 * params.f_max, "quarter-cycle miss: {miss}");
    }

    #[test]
    fn constant_pump_reaches_rate_equation_fixed_point() {
        // No field: dF/dt = -Gamma F + R (F_max z - F) settles at
        // F = F_max R / (R + Gamma) along z.
        let mut params = quiet_params();
        params.gamma0 = 50.0;
        let drive = DriveConfig {
            pump_power: 1.0,
            probe_power: 0.0,
            omega_pump: 0.0,
            pump_rate_peak: 25.0,
            pump_waveform: PumpWaveform::Constant,
            polarized: true,
        };
        let mut state = SpinState { f: Vec3::ZERO, t: 0.0 };
        let dt = 1e-4;
        for _ in 0..20_000 {
            state = step(&state, &params, &drive, dt, 0.0, &NO_NOISE).unwrap();
        }
        let expected = params.f_max * 25.0 / 75.0;
        assert!((state.f.z - expected).abs() < 1e-6 * expected, "z = {}", state.f.z);
        assert!(state.f.x.abs() < 1e-9 && state.f.y.abs() < 1e-9);
    }

    #[test]
    fn constant_s3_torque_precesses_about_z() {
        // With B = 0, Gamma ~ 0 and a constant S3, the back-action term is a
        // pure rotation about z at rate G_S * S3.
        let mut params = quiet_params();
        params.gamma0 = 1e-12;
        params.g_s = 50.0;
        let drive = quiet_drive();
        let omega0 = 100.0; // rad/s -> s3 = 2.0
        let s3 = omega0 / params.g_s;
        let n = 2000;
        let dt = std::f64::consts::PI / (2.0 * omega0) / n as f64;
        let mut state = SpinState { f: Vec3::new(3.0, 0.0, 0.0), t: 0.0 };
        for _ in 0..n {
            state = step(&state, &params, &drive, dt, s3, &NO_NOISE).unwrap();
        }
        let target = Vec3::new(0.0, 3.0, 0.0);
        assert!((state.f - target).norm() < 1e-6, "got {:?}", state.f);
    }

    #[test]
    fn free_decay_is_exponential_to_second_order() {
        let mut params = quiet_params();
        params.gamma0 = 800.0;
        params.alpha = 100.0;
        let mut drive = quiet_drive();
        drive.probe_power = 2.0; // Gamma_tot = 1000 /s
        let gamma_tot = relaxation_rate(&params, drive.probe_power);
        let dt = 1e-6;
        let n = 1000;
        let mut state = SpinState { f: Vec3::new(1.0, 2.0, -1.0), t: 0.0 };
        let norm0 = state.f.norm();
        for _ in 0..n {
            state = step(&state, &params, &drive, dt, 0.0, &NO_NOISE).unwrap();
        }
        let expected = norm0 * (-gamma_tot * n as f64 * dt).exp();
        let rel = (state.f.norm() - expected).abs() / expected;
        assert!(rel < 1e-6, "relative decay error {rel}");
    }

    #[test]
    fn trajectories_are_bit_reproducible() {
        let mut params = quiet_params();
        params.b_dc = 1.0e-7;
        params.gamma0 = 500.0;
        let drive = quiet_drive();
        let probe = ProbeState::coherent(1.0e-9);
        let traj = TrajectoryConfig { dt: 1e-6, duration: 2e-3, burn_in: 0.011, seed: 1234 };
        let a = simulate_trajectory(&params, &drive, &probe, &traj).unwrap();
        let b = simulate_trajectory(&params, &drive, &probe, &traj).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0.f, y.0.f);
            assert_eq!(x.1.s2_noise, y.1.s2_noise);
            assert_eq!(x.1.s3_noise, y.1.s3_noise);
        }
    }

    #[test]
    fn zero_duration_yields_empty_series() {
        let mut params = quiet_params();
        params.gamma0 = 500.0;
        let probe = ProbeState::coherent(1.0e-9);
        let traj = TrajectoryConfig { dt: 1e-6, duration: 0.0, burn_in: 0.011, seed: 9 };
        let out = simulate_trajectory(&params, &quiet_drive(), &probe, &traj).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn unpolarized_component_variance_matches_sigma_f2() {
        // Pump off, back-action off, noiseless probe (kappa = 0) but probe
        // relaxation on: every component is OU with variance sigma_f2.
        let mut params = quiet_params();
        params.b_dc = 6.0e-7;
        params.gamma0 = 1000.0;
        params.alpha = 150.0;
        let mut drive = quiet_drive();
        drive.probe_power = 1.0;
        let probe = ProbeState::coherent(0.0);
        let omega_l = larmor_frequency(&params);
        let dt = MAX_PHASE_PER_STEP / omega_l * 0.9;
        let traj = TrajectoryConfig { dt, duration: 0.5, burn_in: 0.01, seed: 77 };
        let series = simulate_trajectory(&params, &drive, &probe, &traj).unwrap();
        let n = series.len() as f64;
        let mut sums = [0.0_f64; 3];
        let mut sq = [0.0_f64; 3];
        for (s, _) in &series {
            for (i, v) in [s.f.x, s.f.y, s.f.z].into_iter().enumerate() {
                sums[i] += v;
                sq[i] += v * v;
            }
        }
        let mean_var: f64 = (0..3)
            .map(|i| sq[i] / n - (sums[i] / n) * (sums[i] / n))
            .sum::<f64>()
            / 3.0;
        let rel = (mean_var - params.sigma_f2).abs() / params.sigma_f2;
        assert!(rel < 0.15, "variance off by {rel}: {mean_var}");
    }

    #[test]
    fn non_finite_noise_is_reported() {
        let params = quiet_params();
        let drive = quiet_drive();
        let state = SpinState { f: Vec3::new(1.0, 0.0, 0.0), t: 0.0 };
        let bad = LangevinIncrement {
            atomic: Vec3::new(f64::NAN, 0.0, 0.0),
            probe: Vec3::ZERO,
        };
        match step(&state, &params, &drive, 1e-6, 0.0, &bad) {
            Err(SdeError::NonFinite { .. }) => {}
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn coarse_dt_is_rejected() {
        let mut params = quiet_params();
        params.b_dc = 6.0e-6; // omega_L ~ 2.4e5 rad/s
        let traj = TrajectoryConfig { dt: 1e-5, duration: 0.1, burn_in: 5.0, seed: 1 };
        match traj.validate(&params) {
            Err(SdeError::Config(msg)) => assert!(msg.contains("dt too coarse"), "{msg}"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn short_burn_in_is_rejected() {
        let mut params = quiet_params();
        params.gamma0 = 100.0;
        let traj = TrajectoryConfig { dt: 1e-6, duration: 0.1, burn_in: 0.01, seed: 1 };
        assert!(matches!(traj.validate(&params), Err(SdeError::Config(_))));
    }

    #[test]
    fn pump_waveform_shapes_are_normalized() {
        let pulsed = PumpWaveform::Pulsed { duty: 0.2 };
        // Peak of the raised cosine sits mid-pulse with value 1.
        let peak_theta = std::f64::consts::TAU * 0.1;
        assert!((pulsed.value(peak_theta) - 1.0).abs() < 1e-12);
        // Outside the pulse window the rate vanishes.
        assert_eq!(pulsed.value(std::f64::consts::PI), 0.0);
        // Numerical mean over a period matches the closed form.
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|i| pulsed.value(std::f64::consts::TAU * i as f64 / n as f64))
            .sum::<f64>()
            / n as f64;
        assert!((mean - pulsed.mean()).abs() < 1e-4, "mean {mean}");
        assert!((PumpWaveform::Sinusoidal.mean() - 0.5).abs() < 1e-15);
    }
}
