//! Power-sweep campaigns and scaling-law fits.
//!
//! A campaign walks a grid of (probe power, pump power, probe polarization
//! class, pumped/unpumped), runs the full pipeline per cell — stochastic spin
//! trajectory, polarimeter transduction, lock-in demodulation, Welch
//! spectrum, masking, maximum-likelihood fit, bootstrap — and then fits the
//! scaling laws that characterize the sensor's quantum noise budget:
//!
//! - shot-noise floor: linear in probe power, independent of pump power;
//! - spin-projection-noise total: quadratic in probe power;
//! - back-action total: cubic in probe power and quadratic in pump power.
//!
//! Pumped and unpumped partner cells (and pumped cells across pump powers)
//! share per-cell RNG seeds, so their atomic-noise realizations are common
//! and the back-action subtraction cancels most realization noise.

use crate::config::RunConfig;
use crate::dsp::{
    mask_technical_peaks, welch_psd, Channel, DemodChannels, LockinStream, SpectrumRecord, Window,
};
use crate::fit::{
    bootstrap_fit, fit_spectrum_auto, total_power, BootstrapMode, BootstrapResult, FitError,
    FitResult, MbaEstimate,
};
use crate::probe::{ProbeKind, ReadoutError, SMALL_ANGLE_LIMIT};
use crate::sde::{SdeError, TrajectoryConfig, TrajectorySimulator};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("invalid campaign setup: {0}")]
    Config(String),
    #[error("scaling fit is singular: {0}")]
    Singular(String),
    #[error("free-exponent fit requires positive values: {0}")]
    NonPositive(String),
    #[error("ratio undefined: {0}")]
    Undefined(String),
    #[error("simulation failed: {0}")]
    Sim(#[from] SdeError),
    #[error("readout failed: {0}")]
    Readout(#[from] ReadoutError),
    #[error("dsp failed: {0}")]
    Dsp(#[from] crate::dsp::DspError),
    #[error("fit failed: {0}")]
    Fit(#[from] FitError),
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

/// Sweep definition over the instrument's operating space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignGrid {
    /// Probe powers, mW.
    pub probe_powers: Vec<f64>,
    /// Pump powers, uW.
    pub pump_powers: Vec<f64>,
    pub probe_kinds: Vec<ProbeKind>,
    pub channels: Vec<Channel>,
    /// Which ensemble preparations to run: `true` = pumped (polarized),
    /// `false` = pump blocked (unpolarized reference).
    pub polarizations: Vec<bool>,
    /// Independent repetitions per cell; their spectra are averaged before
    /// fitting.
    pub replicates: usize,
    pub base_seed: u64,
}

impl Default for CampaignGrid {
    fn default() -> Self {
        CampaignGrid {
            probe_powers: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
            pump_powers: vec![5.0, 10.0, 15.0],
            probe_kinds: vec![ProbeKind::Coherent, ProbeKind::Squeezed, ProbeKind::Antisqueezed],
            channels: vec![Channel::Dc, Channel::Rf],
            polarizations: vec![true, false],
            replicates: 1,
            base_seed: 1,
        }
    }
}

impl CampaignGrid {
    pub fn validate(&self) -> Result<(), ScalingError> {
        let fail = |msg: &str| Err(ScalingError::Config(msg.into()));
        if self.probe_powers.is_empty() {
            return fail("probe_powers must be non-empty");
        }
        if self.probe_powers.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return fail("probe_powers must be positive and finite");
        }
        if self.pump_powers.is_empty() {
            return fail("pump_powers must be non-empty");
        }
        if self.pump_powers.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return fail("pump_powers must be positive and finite");
        }
        if self.probe_kinds.is_empty() {
            return fail("probe_kinds must be non-empty");
        }
        if self.channels.is_empty() {
            return fail("channels must be non-empty");
        }
        if self.polarizations.is_empty() {
            return fail("polarizations must be non-empty");
        }
        if self.replicates == 0 {
            return fail("replicates must be >= 1");
        }
        Ok(())
    }

    /// Largest probe power: the reference point for pump-dependence fits.
    pub fn top_probe_power(&self) -> f64 {
        self.probe_powers.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Scaling-law fits
// ---------------------------------------------------------------------------

/// Weighted fit of `y = a0 + a_n * P^n` (or a constant when `n = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// Fixed exponent: 0 (constant), 1, 2, or 3.
    pub exponent_n: u32,
    /// Leading coefficient (0 for a constant fit).
    pub a_n: f64,
    pub a_n_err: f64,
    pub a0: f64,
    pub a0_err: f64,
    /// `10 log10(a_n / a_n_coherent)`; filled during table assembly, `None`
    /// when either coefficient is non-positive.
    pub db_vs_coherent: Option<f64>,
    pub db_err: Option<f64>,
}

/// Weighted least squares for `y = a0 + a_n * P^n`.
///
/// With `n = 0` the model is a pure constant (`a_n` fixed at zero), used for
/// pump-independence checks.
pub fn fit_power_law(points: &[(f64, f64, f64)], n: u32) -> Result<ScalingFit, ScalingError> {
    if points.len() < 3 {
        return Err(ScalingError::Config(format!(
            "power-law fit needs >= 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(p, y, s)| !(p.is_finite() && y.is_finite() && s > 0.0)) {
        return Err(ScalingError::Config(
            "power-law fit requires finite points with sigma_y > 0".into(),
        ));
    }
    if n == 0 {
        // Weighted mean.
        let mut sw = 0.0;
        let mut swy = 0.0;
        for &(_, y, s) in points {
            let w = 1.0 / (s * s);
            sw += w;
            swy += w * y;
        }
        return Ok(ScalingFit {
            exponent_n: 0,
            a_n: 0.0,
            a_n_err: 0.0,
            a0: swy / sw,
            a0_err: (1.0 / sw).sqrt(),
            db_vs_coherent: None,
            db_err: None,
        });
    }
    // Normal equations for basis [1, P^n].
    let (mut s00, mut s01, mut s11, mut b0, mut b1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(p, y, s) in points {
        let x = p.powi(n as i32);
        let w = 1.0 / (s * s);
        s00 += w;
        s01 += w * x;
        s11 += w * x * x;
        b0 += w * y;
        b1 += w * x * y;
    }
    let det = s00 * s11 - s01 * s01;
    let scale = s00 * s11;
    if !(det.is_finite()) || det.abs() <= 1e-12 * scale {
        return Err(ScalingError::Singular(
            "all abscissas equal (or numerically collinear)".into(),
        ));
    }
    let a0 = (s11 * b0 - s01 * b1) / det;
    let a_n = (s00 * b1 - s01 * b0) / det;
    Ok(ScalingFit {
        exponent_n: n,
        a_n,
        a_n_err: (s00 / det).sqrt(),
        a0,
        a0_err: (s11 / det).sqrt(),
        db_vs_coherent: None,
        db_err: None,
    })
}

/// Free-exponent estimate: the log–log slope of `y - a0` vs `P`, with the
/// offset `a0` chosen to make the relation most nearly a pure power law.
///
/// Used as a verification statistic; the fixed-exponent fits above are the
/// primary quantities. Requires at least 4 points with `P > 0` and `y > 0`.
pub fn fit_free_exponent(points: &[(f64, f64, f64)]) -> Result<(f64, f64), ScalingError> {
    if points.len() < 4 {
        return Err(ScalingError::Config(format!(
            "free-exponent fit needs >= 4 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(p, _, s)| !(p > 0.0) || !(s > 0.0)) {
        return Err(ScalingError::Config(
            "free-exponent fit requires P > 0 and sigma_y > 0".into(),
        ));
    }
    let y_min = points.iter().map(|&(_, y, _)| y).fold(f64::INFINITY, f64::min);
    let y_max = points.iter().map(|&(_, y, _)| y).fold(f64::NEG_INFINITY, f64::max);
    if !(y_min > 0.0) {
        return Err(ScalingError::NonPositive(format!(
            "smallest ordinate is {y_min}; offset removal cannot keep all values positive"
        )));
    }
    let span = (y_max - y_min).max(1e-300);
    // Weighted log-log regression at a trial offset; returns (sse, slope,
    // slope_err).
    let regress = |a0: f64| -> (f64, f64, f64) {
        let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut pts = Vec::with_capacity(points.len());
        for &(p, y, s) in points {
            let d = y - a0;
            if !(d > 0.0) {
                return (f64::INFINITY, 0.0, 0.0);
            }
            let lx = p.ln();
            let ly = d.ln();
            let sigma_ly = (s / d).max(1e-12);
            let w = 1.0 / (sigma_ly * sigma_ly);
            sw += w;
            sx += w * lx;
            sy += w * ly;
            sxx += w * lx * lx;
            sxy += w * lx * ly;
            pts.push((lx, ly, w));
        }
        let det = sw * sxx - sx * sx;
        if det.abs() < 1e-12 * sw * sxx {
            return (f64::INFINITY, 0.0, 0.0);
        }
        let slope = (sw * sxy - sx * sy) / det;
        let intercept = (sxx * sy - sx * sxy) / det;
        let mut sse = 0.0;
        for (lx, ly, w) in pts {
            let r = ly - (intercept + slope * lx);
            sse += w * r * r;
        }
        (sse, slope, (sw / det).sqrt())
    };
    // Coarse scan then golden-section refinement over the offset.
    let lo = y_min - 10.0 * span;
    let hi = y_min - 1e-9 * span.max(y_min);
    let mut best_a0 = 0.0_f64.clamp(lo, hi);
    let mut best = regress(best_a0).0;
    let n_scan = 400;
    for i in 0..=n_scan {
        let a0 = lo + (hi - lo) * i as f64 / n_scan as f64;
        let (sse, _, _) = regress(a0);
        if sse < best {
            best = sse;
            best_a0 = a0;
        }
    }
    let mut a = (best_a0 - (hi - lo) / n_scan as f64).max(lo);
    let mut b = (best_a0 + (hi - lo) / n_scan as f64).min(hi);
    let phi = 0.5 * (3.0 - 5.0_f64.sqrt());
    for _ in 0..80 {
        let x1 = a + phi * (b - a);
        let x2 = b - phi * (b - a);
        if regress(x1).0 < regress(x2).0 {
            b = x2;
        } else {
            a = x1;
        }
    }
    let a0_best = 0.5 * (a + b);
    let (sse, slope, slope_err) = regress(a0_best);
    if !sse.is_finite() {
        return Err(ScalingError::NonPositive(
            "no offset keeps all ordinates positive".into(),
        ));
    }
    Ok((slope, slope_err))
}

/// `10 log10(a / a_ref)`: relative coefficient change against the coherent
/// reference.
pub fn db_ratio(a: f64, a_ref: f64) -> Result<f64, ScalingError> {
    if !(a > 0.0 && a_ref > 0.0) {
        return Err(ScalingError::Undefined(format!(
            "dB ratio needs positive coefficients, got ({a}, {a_ref})"
        )));
    }
    Ok(10.0 * (a / a_ref).log10())
}

/// Propagated uncertainty of [`db_ratio`] from independent coefficient errors.
pub fn db_ratio_err(a: f64, a_err: f64, a_ref: f64, a_ref_err: f64) -> f64 {
    let c = 10.0 / std::f64::consts::LN_10;
    c * ((a_err / a).powi(2) + (a_ref_err / a_ref).powi(2)).sqrt()
}

// ---------------------------------------------------------------------------
// Cell pipeline
// ---------------------------------------------------------------------------

/// One grid cell: a single simulated acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub probe_kind: ProbeKind,
    /// Probe power, mW.
    pub p_pr: f64,
    /// Pump power, uW (ignored when `polarized` is false).
    pub p_pu: f64,
    pub polarized: bool,
    pub replicate: usize,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-cell RNG seed.
///
/// Deliberately independent of pump power, of the pumped/unpumped switch,
/// and of the probe kind: partner cells share their noise realization, so
/// back-action subtractions, pump-power ratios, and squeezing dB ratios are
/// all taken between runs with common random numbers. (Probe-kind factors
/// scale the same underlying noise draws, so sharing the stream is exact.)
pub fn cell_seed(base: u64, p_pr: f64, replicate: usize) -> u64 {
    mix64(base ^ mix64(p_pr.to_bits()) ^ mix64(replicate as u64 ^ 0x5bd1_e995))
}

/// Seed for the bootstrap of one fitted channel.
pub fn bootstrap_seed(cell: u64, channel: Channel) -> u64 {
    let c = match channel {
        Channel::Dc => 11u64,
        Channel::Rf => 13,
    };
    mix64(cell ^ mix64(c))
}

/// Simulates one cell and returns its demodulated (dc, rf) spectra with all
/// fit masks applied.
///
/// The signal path is streamed: each integrator step is transduced to a
/// polarimeter voltage and fed straight into the lock-in, so memory stays
/// independent of the simulated duration.
pub fn simulate_cell_spectra(
    cfg: &RunConfig,
    spec: &CellSpec,
) -> Result<(SpectrumRecord, SpectrumRecord), ScalingError> {
    let params = &cfg.physical;
    let drive = cfg.drive_for(spec.p_pu, spec.p_pr, spec.polarized);
    let probe = cfg.probe_state(spec.probe_kind);
    let det = cfg.detector_config();
    det.validate()?;
    let seed = cell_seed(cfg.grid.base_seed, spec.p_pr, spec.replicate);
    let traj = TrajectoryConfig {
        dt: cfg.dt(),
        duration: cfg.sim.duration,
        burn_in: cfg.sim.burn_in,
        seed,
    };
    let mut sim = TrajectorySimulator::new(params, &drive, &probe, &traj)?;
    sim.run_burn_in(traj.burn_in)?;

    let f_ref = drive.omega_pump / TAU;
    let t0 = sim.state().t + traj.dt;
    let mut lockin = LockinStream::new(
        t0,
        cfg.f_sim(),
        f_ref,
        cfg.drive.phase_ref,
        cfg.lp_cutoff(),
        cfg.dsp.decim,
    )?;
    let n_steps = (traj.duration / traj.dt).round() as u64;
    let phi_limit = SMALL_ANGLE_LIMIT;
    let mut max_phi = 0.0_f64;
    for _ in 0..n_steps {
        let (state, stokes) = sim.advance()?;
        let phi = det.g_f * state.f.z * stokes.s1;
        if phi.abs() > max_phi {
            max_phi = phi.abs();
        }
        lockin.feed(det.transduce(state.f.z, stokes.s1, stokes.s2_noise));
    }
    if max_phi >= phi_limit {
        return Err(ScalingError::Readout(ReadoutError::SmallAngleViolation { max_phi }));
    }
    let DemodChannels { dc, rf, f_s_out, .. } = lockin.finish();

    let spectrum_for = |values: Vec<f64>, channel: Channel| -> Result<SpectrumRecord, ScalingError> {
        let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
        let centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
        let mut rec = welch_psd(
            &centered,
            f_s_out,
            cfg.dsp.segment_len,
            cfg.dsp.overlap,
            Window::Hann,
        )?;
        rec.meta.channel = channel.label().into();
        rec.meta.probe_kind = spec.probe_kind.label().into();
        rec.meta.p_pr_mw = spec.p_pr;
        rec.meta.p_pu_uw = if spec.polarized { spec.p_pu } else { 0.0 };
        rec.meta.polarized = spec.polarized;
        rec.meta.xi2 = probe.detected().xi2;
        rec.meta.xibar2 = probe.xibar2;
        rec.meta.seed = seed;
        apply_fit_masks(&mut rec, cfg);
        Ok(rec)
    };
    Ok((spectrum_for(dc, Channel::Dc)?, spectrum_for(rf, Channel::Rf)?))
}

/// Standard fit-preparation masks: the mean-subtraction artifact at 0 Hz,
/// the filter roll-off region above the low-pass cutoff, configured
/// technical bands, and bin thinning against neighbor-bin correlation.
pub fn apply_fit_masks(rec: &mut SpectrumRecord, cfg: &RunConfig) {
    let lp = cfg.lp_cutoff();
    if let Some(m) = rec.mask.first_mut() {
        *m = true;
    }
    for (i, &f) in rec.freqs.iter().enumerate() {
        if f > lp || i % cfg.dsp.fit_bin_stride != 0 {
            rec.mask[i] = true;
        }
    }
    mask_technical_peaks(rec, &cfg.dsp.mask_bands);
}

/// Element-wise average of replicate spectra; segment counts accumulate so
/// the fitter sees the combined statistical weight.
pub fn average_spectra(records: Vec<SpectrumRecord>) -> Result<SpectrumRecord, ScalingError> {
    let n = records.len();
    let mut iter = records.into_iter();
    let mut acc = iter
        .next()
        .ok_or_else(|| ScalingError::Config("cannot average zero spectra".into()))?;
    for rec in iter {
        if rec.freqs != acc.freqs {
            return Err(ScalingError::Config(
                "replicate spectra lie on different frequency grids".into(),
            ));
        }
        for (a, p) in acc.psd.iter_mut().zip(&rec.psd) {
            *a += p;
        }
        acc.meta.n_segments += rec.meta.n_segments;
    }
    for a in acc.psd.iter_mut() {
        *a /= n as f64;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Campaign
// ---------------------------------------------------------------------------

/// Fitted summary of one (cell, channel) after replicate averaging.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub probe_kind: ProbeKind,
    pub channel: Channel,
    pub p_pr: f64,
    /// `None` for unpumped reference cells.
    pub p_pu: Option<f64>,
    pub polarized: bool,
    /// Conjugate-quadrature factor of the probe before transmission loss;
    /// divides detected back-action power to recover the intrinsic one.
    pub xibar2: f64,
    pub fit: FitSummary,
    pub bootstrap: BootstrapResult,
    /// Averaged spectrum the fit ran on. Persisted separately as CSV, so the
    /// JSON summary skips it (absent after reloading).
    #[serde(skip)]
    pub spectrum: Option<SpectrumRecord>,
    /// Detected flat floor xi2 * s_psn, uV^2/Hz.
    pub floor_detected: f64,
    /// Half bootstrap 68% width of the detected floor.
    pub floor_sigma: f64,
    /// Integrated Lorentzian power, uV^2.
    pub atomic_total: f64,
    pub atomic_total_sigma: f64,
}

/// The fitted model and its quality indicators (the full covariance stays
/// with the in-memory [`FitResult`]; tables use bootstrap errors).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub s_psn: f64,
    pub s_atomic: f64,
    pub delta_f: f64,
    pub xi2: f64,
    pub loglik: f64,
    pub n_used: usize,
    pub k_eff: f64,
    pub degenerate: bool,
}

impl FitSummary {
    fn from_fit(fit: &FitResult) -> Self {
        FitSummary {
            s_psn: fit.model.s_psn,
            s_atomic: fit.model.s_atomic,
            delta_f: fit.model.delta_f,
            xi2: fit.model.xi2,
            loglik: fit.loglik,
            n_used: fit.n_used,
            k_eff: fit.k_eff,
            degenerate: fit.degenerate,
        }
    }
}

/// A cell that failed; campaigns aggregate failures instead of aborting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellFailure {
    pub spec: CellSpec,
    pub error: String,
}

/// Everything a campaign produced, in memory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignResult {
    pub cells: Vec<CellSummary>,
    pub failures: Vec<CellFailure>,
}

impl CampaignResult {
    /// Finds one summary by its key.
    pub fn find(
        &self,
        kind: ProbeKind,
        channel: Channel,
        p_pr: f64,
        p_pu: Option<f64>,
    ) -> Option<&CellSummary> {
        self.cells.iter().find(|c| {
            c.probe_kind == kind
                && c.channel == channel
                && c.p_pr == p_pr
                && c.p_pu == p_pu
                && c.polarized == p_pu.is_some()
        })
    }
}

fn half_width(p: &[f64; 3]) -> f64 {
    (0.5 * (p[2] - p[0])).abs()
}

/// Runs the fit + bootstrap stage on an averaged spectrum.
fn summarize_spectrum(
    rec: SpectrumRecord,
    kind: ProbeKind,
    channel: Channel,
    p_pr: f64,
    p_pu: Option<f64>,
    n_boot: usize,
    seed: u64,
) -> Result<CellSummary, ScalingError> {
    let xi2 = rec.meta.xi2;
    let fit = fit_spectrum_auto(&rec, xi2)?;
    let bootstrap = bootstrap_fit(&rec, xi2, n_boot, BootstrapMode::Parametric, seed)?;
    let floor_detected = fit.model.floor();
    let floor_sigma = (half_width(&bootstrap.s_psn) * xi2).max(1e-12 * floor_detected.abs() + 1e-300);
    let atomic_total = total_power(fit.model.s_atomic, fit.model.delta_f);
    let atomic_total_sigma = half_width(&bootstrap.atomic_total).max(1e-300);
    Ok(CellSummary {
        probe_kind: kind,
        channel,
        p_pr,
        p_pu,
        polarized: p_pu.is_some(),
        xibar2: rec.meta.xibar2,
        fit: FitSummary::from_fit(&fit),
        bootstrap,
        spectrum: Some(rec),
        floor_detected,
        floor_sigma,
        atomic_total,
        atomic_total_sigma,
    })
}

/// Work unit: one (kind, p_pr, pump-or-unpumped) acquisition across all
/// replicates, producing one summary per requested channel.
struct CellJob {
    kind: ProbeKind,
    p_pr: f64,
    p_pu: Option<f64>,
    order: usize,
}

fn run_cell_job(cfg: &RunConfig, job: &CellJob) -> Result<Vec<CellSummary>, ScalingError> {
    let mut dc_specs = Vec::new();
    let mut rf_specs = Vec::new();
    for replicate in 0..cfg.grid.replicates {
        let spec = CellSpec {
            probe_kind: job.kind,
            p_pr: job.p_pr,
            p_pu: job.p_pu.unwrap_or(0.0),
            polarized: job.p_pu.is_some(),
            replicate,
        };
        let (dc, rf) = simulate_cell_spectra(cfg, &spec)?;
        dc_specs.push(dc);
        rf_specs.push(rf);
    }
    let seed0 = cell_seed(cfg.grid.base_seed, job.p_pr, 0);
    let mut out = Vec::new();
    for channel in &cfg.grid.channels {
        let averaged = match channel {
            Channel::Dc => average_spectra(dc_specs.clone())?,
            Channel::Rf => average_spectra(rf_specs.clone())?,
        };
        out.push(summarize_spectrum(
            averaged,
            job.kind,
            *channel,
            job.p_pr,
            job.p_pu,
            cfg.fit.n_boot,
            bootstrap_seed(seed0, *channel),
        )?);
    }
    Ok(out)
}

/// Runs every cell of the campaign grid, fitting and bootstrapping each
/// spectrum. Failures are collected per cell, never aborting the sweep.
/// Deterministic for a given config: results are ordered by grid index and
/// all randomness derives from per-cell seeds.
pub fn run_campaign(cfg: &RunConfig, jobs: usize) -> Result<CampaignResult, ScalingError> {
    cfg.grid.validate()?;
    let mut queue: Vec<CellJob> = Vec::new();
    let mut order = 0usize;
    for kind in &cfg.grid.probe_kinds {
        for &p_pr in &cfg.grid.probe_powers {
            if cfg.grid.polarizations.contains(&false) {
                queue.push(CellJob { kind: *kind, p_pr, p_pu: None, order });
                order += 1;
            }
            if cfg.grid.polarizations.contains(&true) {
                for &p_pu in &cfg.grid.pump_powers {
                    queue.push(CellJob { kind: *kind, p_pr, p_pu: Some(p_pu), order });
                    order += 1;
                }
            }
        }
    }

    let execute = |job: &CellJob| -> (usize, Result<Vec<CellSummary>, ScalingError>) {
        (job.order, run_cell_job(cfg, job))
    };
    // jobs == 1 runs inline; jobs == 0 lets the thread pool pick its width.
    let mut results: Vec<(usize, Result<Vec<CellSummary>, ScalingError>)> = if jobs == 1 {
        queue.iter().map(execute).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| ScalingError::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            queue.par_iter().map(execute).collect()
        })
    };
    results.sort_by_key(|(order, _)| *order);

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for ((order, result), job) in results.into_iter().zip(&queue) {
        debug_assert_eq!(order, job.order);
        match result {
            Ok(mut summaries) => cells.append(&mut summaries),
            Err(e) => failures.push(CellFailure {
                spec: CellSpec {
                    probe_kind: job.kind,
                    p_pr: job.p_pr,
                    p_pu: job.p_pu.unwrap_or(0.0),
                    polarized: job.p_pu.is_some(),
                    replicate: 0,
                },
                error: e.to_string(),
            }),
        }
    }
    Ok(CampaignResult { cells, failures })
}

/// Back-action extraction from a pumped/unpumped summary pair: the pumped
/// Lorentzian total minus the unpumped (projection-noise) one.
///
/// The quoted error adds the two bootstrap errors in quadrature. The two
/// acquisitions share their noise realization (common per-cell seeds), which
/// positively correlates the totals, so the quadrature sum is a conservative
/// upper bound on the spread of the difference.
pub fn decompose_pair(pol: &CellSummary, unpol: &CellSummary) -> Result<MbaEstimate, ScalingError> {
    if pol.probe_kind != unpol.probe_kind
        || pol.channel != unpol.channel
        || pol.p_pr != unpol.p_pr
        || !pol.polarized
        || unpol.polarized
    {
        return Err(ScalingError::Config(
            "back-action subtraction needs a pumped cell and its unpumped partner \
             at the same probe kind, channel, and probe power"
                .into(),
        ));
    }
    let total = pol.atomic_total - unpol.atomic_total;
    let std_error = (pol.atomic_total_sigma.powi(2) + unpol.atomic_total_sigma.powi(2))
        .sqrt()
        .max(1e-300);
    if !(pol.xibar2 > 0.0) {
        return Err(ScalingError::Config(format!(
            "conjugate quadrature factor must be positive, got {}",
            pol.xibar2
        )));
    }
    Ok(MbaEstimate {
        total,
        std_error,
        negative: total < 0.0,
        delta_f_pol: pol.fit.delta_f,
        intrinsic: total / pol.xibar2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<(f64, f64, f64)> {
        v.iter().map(|&(p, y)| (p, y, 1.0)).collect()
    }

    #[test]
    fn linear_fit_is_exact_on_linear_data() {
        let points: Vec<(f64, f64, f64)> = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
            .iter()
            .map(|&p| (p, 19.59 * p - 0.48, 0.1))
            .collect();
        let fit = fit_power_law(&points, 1).unwrap();
        assert!((fit.a_n - 19.59).abs() < 1e-9, "a1 {}", fit.a_n);
        assert!((fit.a0 + 0.48).abs() < 1e-9, "a0 {}", fit.a0);
    }

    #[test]
    fn constant_data_yields_zero_slope() {
        let points = pts(&[(1.0, 7.0), (2.0, 7.0), (3.0, 7.0)]);
        let fit = fit_power_law(&points, 1).unwrap();
        assert!(fit.a_n.abs() < 1e-12);
        assert!((fit.a0 - 7.0).abs() < 1e-12);
        // Constant-only fit form.
        let c = fit_power_law(&points, 0).unwrap();
        assert_eq!(c.a_n, 0.0);
        assert!((c.a0 - 7.0).abs() < 1e-12);
    }

    #[test]
    fn cubic_fit_interpolates_exactly() {
        let points = pts(&[(1.0, 3.0), (2.0, 17.0), (3.0, 55.0)]); // 2 P^3 + 1
        let fit = fit_power_law(&points, 3).unwrap();
        assert!((fit.a_n - 2.0).abs() < 1e-9, "a3 {}", fit.a_n);
        assert!((fit.a0 - 1.0).abs() < 1e-9, "a0 {}", fit.a0);
    }

    #[test]
    fn equal_abscissas_are_singular() {
        let points = pts(&[(2.0, 1.0), (2.0, 2.0), (2.0, 3.0)]);
        assert!(matches!(fit_power_law(&points, 1), Err(ScalingError::Singular(_))));
    }

    #[test]
    fn free_exponent_recovers_pure_powers() {
        let quad: Vec<(f64, f64, f64)> =
            [1.0, 2.0, 3.0, 4.0].iter().map(|&p| (p, 7.0 * p * p, 0.01)).collect();
        let (n, _) = fit_free_exponent(&quad).unwrap();
        assert!((n - 2.0).abs() < 1e-3, "exponent {n}");

        let half: Vec<(f64, f64, f64)> = [1.0f64, 2.0, 3.0, 4.0, 5.0]
            .iter()
            .map(|&p| (p, 3.0 * p.powf(2.5), 0.01))
            .collect();
        let (n, _) = fit_free_exponent(&half).unwrap();
        assert!((n - 2.5).abs() < 1e-3, "exponent {n}");
    }

    #[test]
    fn free_exponent_removes_constant_offset() {
        let cubic: Vec<(f64, f64, f64)> = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
            .iter()
            .map(|&p| (p, 320.0 * p * p * p + 1520.0, 1.0))
            .collect();
        let (n, _) = fit_free_exponent(&cubic).unwrap();
        assert!((n - 3.0).abs() < 0.02, "exponent {n}");
    }

    #[test]
    fn free_exponent_rejects_non_positive_values() {
        let points = pts(&[(1.0, -1.0), (2.0, 4.0), (3.0, 9.0), (4.0, 16.0)]);
        assert!(matches!(fit_free_exponent(&points), Err(ScalingError::NonPositive(_))));
    }

    #[test]
    fn db_ratio_matches_reference_values() {
        assert!((db_ratio(14.50, 19.59).unwrap() + 1.31).abs() < 0.005);
        assert!((db_ratio(36.25, 19.59).unwrap() - 2.67).abs() < 0.005);
        assert_eq!(db_ratio(5.0, 5.0).unwrap(), 0.0);
        assert!(matches!(db_ratio(-1.0, 5.0), Err(ScalingError::Undefined(_))));
        assert!(matches!(db_ratio(5.0, 0.0), Err(ScalingError::Undefined(_))));
    }

    #[test]
    fn cell_seeds_pair_partner_runs() {
        let a = cell_seed(1, 1.5, 0);
        // Same (probe power, replicate) regardless of pump or probe kind.
        let b = cell_seed(1, 1.5, 0);
        assert_eq!(a, b);
        // Distinct across powers, replicates, and base seeds.
        assert_ne!(a, cell_seed(1, 2.0, 0));
        assert_ne!(a, cell_seed(1, 1.5, 1));
        assert_ne!(a, cell_seed(2, 1.5, 0));
    }

    #[test]
    fn grid_validation_rejects_empty_lists() {
        let mut grid = CampaignGrid::default();
        grid.probe_kinds.clear();
        assert!(matches!(grid.validate(), Err(ScalingError::Config(_))));
    }

    #[test]
    fn averaging_accumulates_segments() {
        use crate::dsp::SpectrumMeta;
        let rec = |level: f64| SpectrumRecord {
            freqs: vec![0.0, 1.0, 2.0],
            psd: vec![level; 3],
            mask: vec![false; 3],
            meta: SpectrumMeta { n_segments: 100, ..SpectrumMeta::default() },
        };
        let avg = average_spectra(vec![rec(1.0), rec(3.0)]).unwrap();
        assert_eq!(avg.psd, vec![2.0; 3]);
        assert_eq!(avg.meta.n_segments, 200);
    }
}
