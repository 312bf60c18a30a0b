//! Built-in verification suite: ten end-to-end checks that exercise the
//! whole pipeline (simulation, demodulation, spectral fitting, scaling
//! analysis, result store) against analytic oracles and the documented
//! scaling laws.
//!
//! The checks run on a reduced-field configuration (10.5 kHz precession
//! instead of 42 kHz) so the integrator takes 4x fewer steps per second of
//! signal while every downstream rate (5250 Hz output, 10.25 Hz bins) stays
//! identical to the default setup. Campaign results are cached per process,
//! so checks that share a campaign do not re-simulate it.

use crate::config::RunConfig;
use crate::dsp::{effective_segments, welch_psd, Channel, SpectrumMeta, SpectrumRecord, Window};
use crate::fit::{bootstrap_fit, total_power, BootstrapMode, NoiseFitModel};
use crate::probe::{ProbeKind, ProbeState};
use crate::report::{build_tables, write_sweep, ReportTables};
use crate::scaling::{
    decompose_pair, fit_free_exponent, fit_power_law, run_campaign, CampaignGrid, CampaignResult,
};
use crate::sde::{
    DriveConfig, PhysicalParams, PumpWaveform, TrajectoryConfig, TrajectorySimulator,
};
use crate::store::MANIFEST_NAME;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use std::f64::consts::TAU;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

/// Outcome of one verification check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub details: String,
    pub runtime_s: f64,
}

impl CheckResult {
    /// One-line report: `[PASS] 01 noise-floor-linearity (38.2 s): ...`.
    pub fn line(&self) -> String {
        format!(
            "[{}] {:02} {} ({:.1} s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.runtime_s,
            self.details
        )
    }
}

fn finish(
    id: usize,
    name: &'static str,
    t0: Instant,
    outcome: Result<(bool, String), String>,
) -> CheckResult {
    let runtime_s = t0.elapsed().as_secs_f64();
    match outcome {
        Ok((passed, details)) => CheckResult { id, name, passed, details, runtime_s },
        Err(e) => CheckResult { id, name, passed: false, details: format!("error: {e}"), runtime_s },
    }
}

// ---------------------------------------------------------------------------
// Shared campaigns
// ---------------------------------------------------------------------------

/// Default configuration scaled to a 1.5 uT field: identical output rate and
/// bin width, 4x fewer integrator steps per second.
pub fn fast_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.physical.b_dc = 1.5e-6;
    cfg.dsp.decim = 256;
    cfg
}

/// Pumped floor campaign: coherent probe, three pump powers, dc channel.
fn config_floor() -> RunConfig {
    let mut cfg = fast_config();
    cfg.grid = CampaignGrid {
        probe_powers: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
        pump_powers: vec![5.0, 10.0, 15.0],
        probe_kinds: vec![ProbeKind::Coherent],
        channels: vec![Channel::Dc],
        polarizations: vec![true],
        replicates: 1,
        base_seed: 101,
    };
    cfg.sim.duration = 8.0;
    cfg
}

/// Unpolarized coherent campaign: a wide probe-power span (a factor of 20)
/// and long records, sized so the linewidth slope and the high-power peak
/// bend are resolved well past their tolerance bands.
fn config_unpolarized() -> RunConfig {
    let mut cfg = fast_config();
    cfg.grid = CampaignGrid {
        probe_powers: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 5.0, 7.0, 8.5, 10.0],
        // No polarized cells are enumerated; the grid still requires a
        // non-empty pump list.
        pump_powers: vec![10.0],
        probe_kinds: vec![ProbeKind::Coherent],
        channels: vec![Channel::Dc, Channel::Rf],
        polarizations: vec![false],
        replicates: 1,
        base_seed: 202,
    };
    cfg.sim.duration = 40.0;
    cfg
}

/// Quadrature-probe campaign: squeezed and antisqueezed cells over the low
/// probe-power window. Shares `base_seed` with the coherent campaign so each
/// per-power comparison across probe states rides on common atomic noise.
fn config_squeezed() -> RunConfig {
    let mut cfg = fast_config();
    cfg.grid = CampaignGrid {
        probe_powers: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
        pump_powers: vec![10.0],
        probe_kinds: vec![ProbeKind::Squeezed, ProbeKind::Antisqueezed],
        channels: vec![Channel::Dc, Channel::Rf],
        polarizations: vec![false],
        replicates: 1,
        base_seed: 202,
    };
    cfg.sim.duration = 14.0;
    cfg
}

/// Back-action campaign: pumped coherent cells at a pump power and its
/// double, plus same-grid unpumped partners for the subtraction. Long
/// records keep the free-exponent error small enough that the measured
/// scaling is meaningful on its own.
fn config_backaction() -> RunConfig {
    let mut cfg = fast_config();
    cfg.grid = CampaignGrid {
        probe_powers: vec![1.0, 1.5, 2.0, 3.0],
        pump_powers: vec![10.0, 20.0],
        probe_kinds: vec![ProbeKind::Coherent],
        channels: vec![Channel::Dc, Channel::Rf],
        polarizations: vec![false, true],
        replicates: 1,
        base_seed: 404,
    };
    cfg.sim.duration = 40.0;
    cfg
}

/// Null campaign: back-action coupling switched off, pumped and unpumped
/// cells in one grid.
fn config_null() -> RunConfig {
    let mut cfg = fast_config();
    cfg.physical.g_s = 0.0;
    cfg.grid = CampaignGrid {
        probe_powers: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
        pump_powers: vec![5.0, 10.0],
        probe_kinds: vec![ProbeKind::Coherent],
        channels: vec![Channel::Dc, Channel::Rf],
        polarizations: vec![false, true],
        replicates: 1,
        base_seed: 303,
    };
    cfg.sim.duration = 8.0;
    cfg
}

static CAMP_FLOOR: OnceLock<Result<CampaignResult, String>> = OnceLock::new();
static CAMP_UNPOL: OnceLock<Result<CampaignResult, String>> = OnceLock::new();
static CAMP_SQUEEZED: OnceLock<Result<CampaignResult, String>> = OnceLock::new();
static CAMP_BACKACTION: OnceLock<Result<CampaignResult, String>> = OnceLock::new();
static CAMP_NULL: OnceLock<Result<CampaignResult, String>> = OnceLock::new();

/// Runs (once per process) and returns a cached campaign. The `jobs` value of
/// the first caller wins.
fn campaign(
    lock: &'static OnceLock<Result<CampaignResult, String>>,
    cfg_fn: fn() -> RunConfig,
    jobs: usize,
) -> Result<&'static CampaignResult, String> {
    let result = lock.get_or_init(|| {
        let cfg = cfg_fn();
        let camp = run_campaign(&cfg, jobs).map_err(|e| e.to_string())?;
        if !camp.failures.is_empty() {
            return Err(format!(
                "{} of {} cells failed; first: {}",
                camp.failures.len(),
                camp.failures.len() + camp.cells.len(),
                camp.failures[0].error
            ));
        }
        Ok(camp)
    });
    result.as_ref().map_err(|e| e.clone())
}

fn coherent_dc(tables: &ReportTables) -> Result<(f64, f64), String> {
    let row = tables
        .spn
        .iter()
        .find(|r| r.channel == Channel::Dc && r.probe_kind == ProbeKind::Coherent)
        .ok_or("missing spin-noise fit for the coherent dc cells")?;
    let n = row.exponent.ok_or("spin-noise free-exponent fit unavailable")?;
    let err = row.exponent_err.unwrap_or(f64::NAN);
    Ok((n, err))
}

/// Inverse-variance weighted mean of `(value, sigma)` estimates.
fn weighted_mean(estimates: &[(f64, f64)]) -> (f64, f64) {
    let mut sw = 0.0;
    let mut swv = 0.0;
    for &(v, s) in estimates {
        let w = 1.0 / (s * s);
        sw += w;
        swv += w * v;
    }
    (swv / sw, (1.0 / sw).sqrt())
}

// ---------------------------------------------------------------------------
// Checks 1-4: campaign scaling laws
// ---------------------------------------------------------------------------

/// Floor scaling: the detected white floor must follow probe power with unit
/// exponent and show no pump-power dependence.
pub fn check_floor_linearity(jobs: usize) -> CheckResult {
    let t0 = Instant::now();
    let outcome = (|| -> Result<(bool, String), String> {
        let camp = campaign(&CAMP_FLOOR, config_floor, jobs)?;
        let points: Vec<(f64, f64, f64)> = camp
            .cells
            .iter()
            .map(|c| (c.p_pr, c.floor_detected, c.floor_sigma))
            .collect();
        if points.len() != 18 {
            return Err(format!("expected 18 pumped cells, got {}", points.len()));
        }
        let (n, n_err) = fit_free_exponent(&points).map_err(|e| e.to_string())?;

        let mut slopes = Vec::new();
        for &p_pr in &config_floor().grid.probe_powers {
            let pts: Vec<(f64, f64, f64)> = camp
                .cells
                .iter()
                .filter(|c| c.p_pr == p_pr)
                .map(|c| (c.p_pu.unwrap_or(0.0), c.floor_detected, c.floor_sigma))
                .collect();
            let fit = fit_power_law(&pts, 1).map_err(|e| e.to_string())?;
            slopes.push((fit.a_n, fit.a_n_err));
        }
        let (slope, slope_err) = weighted_mean(&slopes);

        let runtime = t0.elapsed().as_secs_f64();
        let exp_ok = (n - 1.0).abs() <= 0.10;
        let slope_ok = slope.abs() < 2.0 * slope_err;
        let time_ok = runtime <= 120.0;
        Ok((
            exp_ok && slope_ok && time_ok,
            format!(
                "floor exponent {n:.3} +/- {n_err:.3} (want 1.00 +/- 0.10); pump slope \
                 {slope:.2e} +/- {slope_err:.2e} uV^2/Hz/uW ({}); runtime {runtime:.0} s (limit 120)",
                if slope_ok { "zero at 2 sigma" } else { "NOT zero at 2 sigma" }
            ),
        ))
    })();
    finish(1, "noise-floor-linearity", t0, outcome)
}

/// Spin-noise scaling: quadratic total power, affine linewidth with the
/// configured broadening slope, and a sub-quadratic peak at the top power.
pub fn check_spin_noise_quadraticity(jobs: usize) -> CheckResult {
    let t0 = Instant::now();
    let outcome = (|| -> Result<(bool, String), String> {
        let camp = campaign(&CAMP_UNPOL, config_unpolarized, jobs)?;
        let tables = build_tables(&camp.cells, true).map_err(|e| e.to_string())?;
        let (n, n_err) = coherent_dc(&tables)?;
        // Both channels demodulate the same trajectory, so pooling their
        // linewidth slopes averages fit noise rather than doubling the data.
        let mut slopes = Vec::new();
        for channel in [Channel::Dc, Channel::Rf] {
            let row = tables
                .spn
                .iter()
                .find(|r| r.channel == channel && r.probe_kind == ProbeKind::Coherent)
                .ok_or("missing spin-noise fit")?;
            slopes.push((row.delta_f_slope, row.delta_f_slope_err));
        }
        let (slope, _) = weighted_mean(&slopes);
        let expected_slope = fast_config().physical.alpha / TAU;
        let slope_ratio = slope / expected_slope;
        let peak = tables
            .spn_peak
            .iter()
            .find(|r| r.channel == Channel::Dc && r.probe_kind == ProbeKind::Coherent)
            .ok_or("missing peak-height fit")?;

        let runtime = t0.elapsed().as_secs_f64();
        let exp_ok = (n - 2.0).abs() <= 0.15;
        let slope_ok = (slope_ratio - 1.0).abs() <= 0.10;
        let peak_ok = peak.top_measured < peak.top_extrapolated && peak.deficit_sigmas > 2.0;
        let time_ok = runtime <= 180.0;
        Ok((
            exp_ok && slope_ok && peak_ok && time_ok,
            format!(
                "total exponent {n:.3} +/- {n_err:.3} (want 2.00 +/- 0.15); linewidth slope \
                 {slope:.2} Hz/mW vs {expected_slope:.2} expected (ratio {slope_ratio:.3}, want 1 +/- 0.10); \
                 top-power peak {:.0} vs quadratic extrapolation {:.0} uV^2/Hz \
                 ({:.1} sigma below); runtime {runtime:.0} s (limit 180)",
                peak.top_measured, peak.top_extrapolated, peak.deficit_sigmas
            ),
        ))
    })();
    finish(2, "spin-noise-quadraticity", t0, outcome)
}

/// Coherent and quadrature-probe unpolarized cells merged into one set, so
/// cross-kind tables can reference the coherent baseline.
fn quadrature_cells(jobs: usize) -> Result<Vec<crate::scaling::CellSummary>, String> {
    let coherent = campaign(&CAMP_UNPOL, config_unpolarized, jobs)?;
    let squeezed = campaign(&CAMP_SQUEEZED, config_squeezed, jobs)?;
    let mut cells = coherent.cells.clone();
    cells.extend(squeezed.cells.iter().cloned());
    Ok(cells)
}

/// Back-action scaling: cubic in probe power at fixed pump, and a 4x cubic
/// coefficient when the pump power doubles.
pub fn check_backaction_scaling(jobs: usize) -> CheckResult {
    let t0 = Instant::now();
    let outcome = (|| -> Result<(bool, String), String> {
        let camp = campaign(&CAMP_BACKACTION, config_backaction, jobs)?;
        let tables = build_tables(&camp.cells, true).map_err(|e| e.to_string())?;
        let mut exps = Vec::new();
        for p_pu in [10.0, 20.0] {
            let row = tables
                .mba
                .iter()
                .find(|r| {
                    r.channel == Channel::Dc
                        && r.probe_kind == ProbeKind::Coherent
                        && r.p_pu == p_pu
                })
                .ok_or(format!("missing back-action fit at pump {p_pu} uW"))?;
            let n = row
                .exponent
                .ok_or(format!("free-exponent fit unavailable at pump {p_pu} uW"))?;
            exps.push((p_pu, n, row.exponent_err.unwrap_or(f64::NAN), row.n_negative));
        }
        let ratio_row = tables
            .mba_ratio
            .iter()
            .find(|r| r.channel == Channel::Dc && r.probe_kind == ProbeKind::Coherent)
            .ok_or("missing doubled-pump coefficient ratio")?;

        let runtime = t0.elapsed().as_secs_f64();
        let exp_ok = exps.iter().all(|&(_, n, _, _)| (n - 3.0).abs() <= 0.2);
        let ratio_ok = (ratio_row.ratio - 4.0).abs() <= 1.0;
        let time_ok = runtime <= 180.0;
        let exp_text = exps
            .iter()
            .map(|(p, n, e, neg)| format!("pump {p} uW: {n:.3} +/- {e:.3} ({neg} negative)"))
            .collect::<Vec<_>>()
            .join("; ");
        // The cubic power counting ignores that probe broadening also widens
        // the line the back-action feeds back into: the driven response
        // carries 1/Gamma_tot^3, so the model's own local exponent is
        // 3 - 3*alpha*P_pr/Gamma_tot, falling from ~2.4 at 1 mW to ~1.7 at
        // 3 mW, and the error-weighted fit settles near the top-power value.
        // The nominal band is asserted as designed; the measured value
        // documents the model's actual scaling.
        Ok((
            exp_ok && ratio_ok && time_ok,
            format!(
                "back-action exponent (want 3.0 +/- 0.2): {exp_text} \
                 [probe broadening widens the line the back-action feeds, so the model's \
                 own local exponent 3 - 3*alpha*P_pr/Gamma_tot falls from ~2.4 to ~1.7 \
                 across this window]; cubic-coefficient ratio {:.2} +/- {:.2} (want 4 +/- 1); \
                 runtime {runtime:.0} s (limit 180)",
                ratio_row.ratio, ratio_row.ratio_err
            ),
        ))
    })();
    finish(3, "backaction-scaling", t0, outcome)
}

/// Squeezing transfer: the floor slope shifts by the injected quadrature
/// factors (in dB) while the spin-noise coefficient stays put.
pub fn check_squeezing_transfer(jobs: usize) -> CheckResult {
    let t0 = Instant::now();
    let outcome = (|| -> Result<(bool, String), String> {
        let cells = quadrature_cells(jobs)?;
        let tables = build_tables(&cells, true).map_err(|e| e.to_string())?;
        let psn_db = |kind: ProbeKind| -> Result<f64, String> {
            tables
                .psn
                .iter()
                .find(|r| r.channel == Channel::Dc && r.probe_kind == kind && r.p_pu.is_none())
                .and_then(|r| r.fit.db_vs_coherent)
                .ok_or(format!("missing floor dB ratio for {}", kind.label()))
        };
        let spn_db = |kind: ProbeKind| -> Result<f64, String> {
            tables
                .spn
                .iter()
                .find(|r| r.channel == Channel::Dc && r.probe_kind == kind)
                .and_then(|r| r.fit.db_vs_coherent)
                .ok_or(format!("missing spin-noise dB ratio for {}", kind.label()))
        };
        let sq = psn_db(ProbeKind::Squeezed)?;
        let anti = psn_db(ProbeKind::Antisqueezed)?;
        let spn_sq = spn_db(ProbeKind::Squeezed)?;
        let spn_anti = spn_db(ProbeKind::Antisqueezed)?;

        let sq_ok = (-1.5..=-0.9).contains(&sq);
        let anti_ok = (2.3..=3.1).contains(&anti);
        let spn_ok = spn_sq.abs() < 0.5 && spn_anti.abs() < 0.5;
        Ok((
            sq_ok && anti_ok && spn_ok,
            format!(
                "floor shift: squeezed {sq:.2} dB (want -1.2 +/- 0.3), antisqueezed {anti:.2} dB \
                 (want +2.7 +/- 0.4); spin-noise coefficient shift {spn_sq:.3} / {spn_anti:.3} dB \
                 (want |dB| < 0.5)"
            ),
        ))
    })();
    finish(4, "squeezing-transfer", t0, outcome)
}

// ---------------------------------------------------------------------------
// Checks 5-7: synthetic-spectrum oracles
// ---------------------------------------------------------------------------

/// Synthetic spectrum drawn around a known model with the per-bin Gamma
/// distribution implied by `n_segments` averaged periodograms.
fn synthetic_record(
    model: &NoiseFitModel,
    df: f64,
    n_bins: usize,
    n_segments: usize,
    overlap: f64,
    seed: u64,
) -> SpectrumRecord {
    let k_eff = effective_segments(n_segments, overlap);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut freqs = Vec::with_capacity(n_bins);
    let mut psd = Vec::with_capacity(n_bins);
    let mut mask = Vec::with_capacity(n_bins);
    for i in 0..n_bins {
        let f = i as f64 * df;
        let truth = model.evaluate(f);
        let gamma = Gamma::new(k_eff, truth / k_eff).expect("valid gamma parameters");
        freqs.push(f);
        psd.push(rng.sample(gamma));
        mask.push(i == 0);
    }
    let meta = SpectrumMeta {
        xi2: model.xi2,
        n_segments,
        overlap,
        seed,
        ..SpectrumMeta::default()
    };
    SpectrumRecord { freqs, psd, mask, meta }
}

/// Composite Simpson rule on a uniform grid (`n` even).
fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Fit fidelity: the likelihood fit recovers known parameters from a
/// 200-segment synthetic spectrum, and the closed-form line power matches
/// numerical quadrature.
pub fn check_fit_fidelity() -> CheckResult {
    let t0 = Instant::now();
    let outcome = (|| -> Result<(bool, String), String> {
        let truth = NoiseFitModel { s_psn: 58.8, s_atomic: 3000.0, delta_f: 250.0, xi2: 1.0 };
        let rec = synthetic_record(&truth, 10.25, 205, 200, 0.5, 424242);
        let fit = crate::fit::fit_spectrum_auto(&rec, truth.xi2).map_err(|e| e.to_string())?;
        let m = fit.model;
        let rel = |got: f64, want: f64| (got / want - 1.0).abs();
        let e_psn = rel(m.s_psn, truth.s_psn);
        let e_atomic = rel(m.s_atomic, truth.s_atomic);
        let e_df = rel(m.delta_f, truth.delta_f);

        // Closed-form total vs numerical quadrature of the fitted Lorentzian:
        // Simpson out to 100 half-widths plus the analytic 1/f^2 tail.
        let (s, d) = (m.s_atomic, m.delta_f);
        let x_max = 100.0 * d;
        let numeric = simpson(|f| s * d * d / (f * f + d * d), 0.0, x_max, 100_000)
            + s * d * d / x_max * (1.0 - (d / x_max).powi(2) / 3.0);
        let closed = total_power(s, d);
        let e_total = (closed / numeric - 1.0).abs();

        let params_ok = e_psn <= 0.05 && e_atomic <= 0.05 && e_df <= 0.05 && !fit.degenerate;
        let total_ok = e_total <= 1.0e-3;
        Ok((
            params_ok && total_ok,
            format!(
                "recovered within (floor {:.1}%, peak {:.1}%, width {:.1}%) of truth (want <= 5%); \
                 closed-form line power vs quadrature differs by {:.2e} (want <= 1e-3)",
                100.0 * e_psn,
                100.0 * e_atomic,
                100.0 * e_df,
                e_total
            ),
        ))
    })();
    finish(5, "fit-fidelity", t0, outcome)
}

/// Relaxation oracle: with the field and couplings off, each spin component
/// is an exactly solvable relaxation process; its simulated PSD must match
/// `(4 sigma_F^2 / Gamma) / (1 + (f/df)^2)` and its variance `sigma_F^2`.
pub fn check_relaxation_psd() -> CheckResult {
    let t0 = Instant::now();
    let outcome = (|| -> Result<(bool, String), String> {
        let mut params = PhysicalParams::default();
        params.b_dc = 0.0;
        params.g_s = 0.0;
        params.alpha = 0.0;
        let drive = DriveConfig {
            pump_power: 0.0,
            probe_power: 0.0,
            omega_pump: 0.0,
            pump_rate_peak: 0.0,
            pump_waveform: PumpWaveform::Constant,
            polarized: false,
        };
        let probe = ProbeState::coherent(0.0);
        let dt = 1.0e-5;
        let duration = 30.0;
        let traj = TrajectoryConfig { dt, duration, burn_in: 0.005, seed: 616161 };
        let mut sim =
            TrajectorySimulator::new(&params, &drive, &probe, &traj).map_err(|e| e.to_string())?;
        sim.run_burn_in(traj.burn_in).map_err(|e| e.to_string())?;
        let n = (duration / dt).round() as usize;
        let mut fx = Vec::with_capacity(n);
        let mut fy = Vec::with_capacity(n);
        let mut fz = Vec::with_capacity(n);
        for _ in 0..n {
            let (state, _) = sim.advance().map_err(|e| e.to_string())?;
            fx.push(state.f.x);
            fy.push(state.f.y);
            fz.push(state.f.z);
        }

        let gamma = params.gamma0;
        let sigma2 = params.sigma_f2;
        let var = (fx.iter().map(|v| v * v).sum::<f64>()
            + fy.iter().map(|v| v * v).sum::<f64>()
            + fz.iter().map(|v| v * v).sum::<f64>())
            / (3.0 * n as f64);
        let var_err = (var / sigma2 - 1.0).abs();

        let f_s = 1.0 / dt;
        let seg = 4096;
        let mut psd_sum: Vec<f64> = Vec::new();
        let mut freqs: Vec<f64> = Vec::new();
        for series in [&fx, &fy, &fz] {
            let rec =
                welch_psd(series, f_s, seg, 0.5, Window::Hann).map_err(|e| e.to_string())?;
            if psd_sum.is_empty() {
                psd_sum = rec.psd.clone();
                freqs = rec.freqs.clone();
            } else {
                for (acc, v) in psd_sum.iter_mut().zip(&rec.psd) {
                    *acc += v;
                }
            }
        }
        let delta_f = gamma / TAU;
        let f_hi = 5.0 * delta_f;
        let mut sq_sum = 0.0;
        let mut n_band = 0usize;
        for (i, &f) in freqs.iter().enumerate() {
            // The zero bin estimates |mean|^2-dominated power; start above it.
            if i == 0 || f > f_hi {
                continue;
            }
            let measured = psd_sum[i] / 3.0;
            let model = (4.0 * sigma2 / gamma) / (1.0 + (f / delta_f).powi(2));
            let rel = measured / model - 1.0;
            sq_sum += rel * rel;
            n_band += 1;
        }
        if n_band < 10 {
            return Err(format!("only {n_band} spectral bins in the comparison band"));
        }
        let rms = (sq_sum / n_band as f64).sqrt();

        let rms_ok = rms <= 0.05;
        let var_ok = var_err <= 0.03;
        Ok((
            rms_ok && var_ok,
            format!(
                "PSD RMS deviation {:.1}% over {n_band} bins up to {f_hi:.0} Hz (want <= 5%); \
                 variance off by {:.2}% (want <= 3%)",
                100.0 * rms,
                100.0 * var_err
            ),
        ))
    })();
    finish(6, "relaxation-psd-oracle", t0, outcome)
}

/// Bootstrap calibration: nominal 68% intervals must cover the truth in
/// 68% +/- 10% of 200 synthetic meta-trials, for each fitted parameter.
pub fn check_bootstrap_coverage() -> CheckResult {
    let t0 = Instant::now();
    let outcome = (|| -> Result<(bool, String), String> {
        let truth = NoiseFitModel { s_psn: 20.0, s_atomic: 400.0, delta_f: 200.0, xi2: 1.0 };
        let n_trials = 200usize;
        let n_boot = 80usize;
        let mut cover = [0usize; 3];
        let mut n_error = 0usize;
        for trial in 0..n_trials {
            let rec = synthetic_record(&truth, 10.0, 91, 150, 0.5, 70_000 + trial as u64);
            match bootstrap_fit(
                &rec,
                truth.xi2,
                n_boot,
                BootstrapMode::Parametric,
                900_000 + trial as u64,
            ) {
                Ok(b) => {
                    let intervals =
                        [(b.s_psn, truth.s_psn), (b.s_atomic, truth.s_atomic), (b.delta_f, truth.delta_f)];
                    for (k, (p, t)) in intervals.iter().enumerate() {
                        if p[0] <= *t && *t <= p[2] {
                            cover[k] += 1;
                        }
                    }
                }
                Err(_) => n_error += 1,
            }
        }
        let frac: Vec<f64> = cover.iter().map(|&c| c as f64 / n_trials as f64).collect();
        let all_ok = frac.iter().all(|&f| (0.58..=0.78).contains(&f));
        Ok((
            all_ok,
            format!(
                "68% interval coverage over {n_trials} trials: floor {:.0}%, peak {:.0}%, \
                 width {:.0}% (want 68 +/- 10%); {n_error} trials errored",
                100.0 * frac[0],
                100.0 * frac[1],
                100.0 * frac[2]
            ),
        ))
    })();
    finish(7, "bootstrap-coverage", t0, outcome)
}

// ---------------------------------------------------------------------------
// Checks 8-10: null, symmetry, determinism
// ---------------------------------------------------------------------------

/// Null back-action: with the coupling off, pumped-minus-unpumped line powers
/// must be consistent with zero in at least 90% of cells.
pub fn check_null_backaction(jobs: usize) -> CheckResult {
    let t0 = Instant::now();
    let outcome = (|| -> Result<(bool, String), String> {
        let camp = campaign(&CAMP_NULL, config_null, jobs)?;
        let mut n = 0usize;
        let mut n_ok = 0usize;
        let mut worst = 0.0f64;
        for pol in camp.cells.iter().filter(|c| c.polarized) {
            let unpol = camp
                .cells
                .iter()
                .find(|c| {
                    !c.polarized && c.channel == pol.channel && c.p_pr == pol.p_pr
                        && c.probe_kind == pol.probe_kind
                })
                .ok_or("pumped cell without an unpumped partner")?;
            let mba = decompose_pair(pol, unpol).map_err(|e| e.to_string())?;
            let z = mba.total.abs() / mba.std_error;
            worst = worst.max(z);
            n += 1;
            if z < 2.0 {
                n_ok += 1;
            }
        }
        if n == 0 {
            return Err("no pumped/unpumped pairs found".into());
        }
        let frac = n_ok as f64 / n as f64;
        Ok((
            frac >= 0.90,
            format!(
                "{n_ok}/{n} cells consistent with zero at 2 sigma ({:.0}%, want >= 90%); \
                 worst |estimate|/sigma = {worst:.2}",
                100.0 * frac
            ),
        ))
    })();
    finish(8, "null-backaction", t0, outcome)
}

/// Channel equivalence: dc and rf must agree on every fitted exponent within
/// combined 2 sigma.
pub fn check_channel_equivalence(jobs: usize) -> CheckResult {
    let t0 = Instant::now();
    let outcome = (|| -> Result<(bool, String), String> {
        let tables_unpol =
            build_tables(&quadrature_cells(jobs)?, true).map_err(|e| e.to_string())?;
        let mba_camp = campaign(&CAMP_BACKACTION, config_backaction, jobs)?;
        let tables_mba = build_tables(&mba_camp.cells, true).map_err(|e| e.to_string())?;

        struct Pair {
            label: String,
            dc: (f64, f64),
            rf: (f64, f64),
        }
        let mut pairs: Vec<Pair> = Vec::new();
        for kind in [ProbeKind::Coherent, ProbeKind::Squeezed, ProbeKind::Antisqueezed] {
            let mut per_channel = Vec::new();
            for channel in [Channel::Dc, Channel::Rf] {
                let row = tables_unpol
                    .psn
                    .iter()
                    .find(|r| r.channel == channel && r.probe_kind == kind && r.p_pu.is_none())
                    .ok_or(format!("missing floor fit: {} {}", channel.label(), kind.label()))?;
                per_channel.push((
                    row.exponent.ok_or("floor free exponent unavailable")?,
                    row.exponent_err.ok_or("floor exponent error unavailable")?,
                ));
            }
            pairs.push(Pair {
                label: format!("floor/{}", kind.label()),
                dc: per_channel[0],
                rf: per_channel[1],
            });

            let mut per_channel = Vec::new();
            for channel in [Channel::Dc, Channel::Rf] {
                let row = tables_unpol
                    .spn
                    .iter()
                    .find(|r| r.channel == channel && r.probe_kind == kind)
                    .ok_or(format!(
                        "missing spin-noise fit: {} {}",
                        channel.label(),
                        kind.label()
                    ))?;
                per_channel.push((
                    row.exponent.ok_or("spin-noise free exponent unavailable")?,
                    row.exponent_err.ok_or("spin-noise exponent error unavailable")?,
                ));
            }
            pairs.push(Pair {
                label: format!("spin-noise/{}", kind.label()),
                dc: per_channel[0],
                rf: per_channel[1],
            });
        }
        for p_pu in [10.0, 20.0] {
            let mut per_channel = Vec::new();
            for channel in [Channel::Dc, Channel::Rf] {
                let row = tables_mba
                    .mba
                    .iter()
                    .find(|r| {
                        r.channel == channel
                            && r.probe_kind == ProbeKind::Coherent
                            && r.p_pu == p_pu
                    })
                    .ok_or(format!(
                        "missing back-action fit: {} pump {p_pu}",
                        channel.label()
                    ))?;
                per_channel.push((
                    row.exponent.ok_or("back-action free exponent unavailable")?,
                    row.exponent_err.ok_or("back-action exponent error unavailable")?,
                ));
            }
            pairs.push(Pair {
                label: format!("back-action/pump{p_pu:.0}"),
                dc: per_channel[0],
                rf: per_channel[1],
            });
        }

        let mut worst_z = 0.0f64;
        let mut worst_label = String::new();
        let mut all_ok = true;
        for p in &pairs {
            let z = (p.dc.0 - p.rf.0).abs() / (p.dc.1.powi(2) + p.rf.1.powi(2)).sqrt();
            if z > worst_z {
                worst_z = z;
                worst_label = format!("{} (dc {:.3}, rf {:.3})", p.label, p.dc.0, p.rf.0);
            }
            if !(z < 2.0) {
                all_ok = false;
            }
        }
        Ok((
            all_ok,
            format!(
                "{} exponent pairs compared; worst |dc - rf| = {worst_z:.2} combined sigma at \
                 {worst_label} (want < 2)",
                pairs.len()
            ),
        ))
    })();
    finish(9, "channel-equivalence", t0, outcome)
}

/// Determinism: the same configuration and seed must produce byte-identical
/// result manifests on repeated runs.
pub fn check_determinism(jobs: usize, scratch: &Path) -> CheckResult {
    let t0 = Instant::now();
    let outcome = (|| -> Result<(bool, String), String> {
        let mut cfg = fast_config();
        cfg.grid = CampaignGrid {
            probe_powers: vec![1.0, 2.0],
            pump_powers: vec![10.0],
            probe_kinds: vec![ProbeKind::Coherent],
            channels: vec![Channel::Dc],
            polarizations: vec![false],
            replicates: 1,
            base_seed: 555,
        };
        cfg.sim.duration = 1.0;
        cfg.fit.n_boot = 30;
        let mut manifests: Vec<Vec<u8>> = Vec::new();
        for run in ["determinism-run1", "determinism-run2"] {
            let root = scratch.join(run);
            let _ = std::fs::remove_dir_all(&root);
            let result = run_campaign(&cfg, jobs).map_err(|e| e.to_string())?;
            let out = write_sweep(&cfg, &result, &root).map_err(|e| e.to_string())?;
            let manifest = std::fs::read(out.join(MANIFEST_NAME)).map_err(|e| e.to_string())?;
            manifests.push(manifest);
        }
        let identical = manifests[0] == manifests[1];
        Ok((
            identical,
            format!(
                "two identical sweeps wrote {}-byte manifests; byte-identical: {identical}",
                manifests[0].len()
            ),
        ))
    })();
    finish(10, "determinism", t0, outcome)
}

/// Runs all ten checks in order. `scratch` holds the determinism check's two
/// throwaway sweep directories.
pub fn run_selftest(jobs: usize, scratch: &Path) -> Vec<CheckResult> {
    vec![
        check_floor_linearity(jobs),
        check_spin_noise_quadraticity(jobs),
        check_backaction_scaling(jobs),
        check_squeezing_transfer(jobs),
        check_fit_fidelity(),
        check_relaxation_psd(),
        check_bootstrap_coverage(),
        check_null_backaction(jobs),
        check_channel_equivalence(jobs),
        check_determinism(jobs, scratch),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_record_matches_model_on_average() {
        let model = NoiseFitModel { s_psn: 10.0, s_atomic: 100.0, delta_f: 150.0, xi2: 1.0 };
        let rec = synthetic_record(&model, 10.0, 100, 200, 0.5, 7);
        // With ~190 effective averages the per-bin scatter is ~7%; the mean
        // over 99 unmasked bins of (measured / truth) concentrates near 1.
        let mut sum = 0.0;
        let mut n = 0;
        for i in 1..rec.freqs.len() {
            sum += rec.psd[i] / model.evaluate(rec.freqs[i]);
            n += 1;
        }
        let mean = sum / n as f64;
        assert!((mean - 1.0).abs() < 0.03, "mean ratio {mean}");
        assert!(rec.mask[0] && !rec.mask[1]);
    }

    #[test]
    fn simpson_integrates_smooth_functions() {
        let got = simpson(|x| x * x, 0.0, 3.0, 300);
        assert!((got - 9.0).abs() < 1e-9);
        let got = simpson(|x| x.sin(), 0.0, std::f64::consts::PI, 1000);
        assert!((got - 2.0).abs() < 1e-9);
    }

    #[test]
    fn weighted_mean_prefers_precise_estimates() {
        let (v, s) = weighted_mean(&[(1.0, 0.1), (3.0, 10.0)]);
        assert!((v - 1.0).abs() < 0.01, "v = {v}");
        assert!(s < 0.1);
    }

    #[test]
    fn fit_fidelity_check_passes() {
        let r = check_fit_fidelity();
        assert!(r.passed, "{}", r.line());
    }
}
