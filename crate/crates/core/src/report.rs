//! Report assembly: turns campaign summaries into scaling tables, figure
//! data, and a checksummed result directory.
//!
//! Table layout mirrors the sensor's noise budget: linear photon-shot-noise
//! fits per pump setting, quadratic spin-projection-noise fits on unpumped
//! cells, cubic back-action fits per pump power plus the quadratic pump
//! dependence at the top probe power, and dB columns against the coherent
//! reference.

use crate::config::{serialize_config, RunConfig};
use crate::dsp::{spectrum_csv, spectrum_meta_json, Channel};
use crate::probe::ProbeKind;
use crate::scaling::{
    db_ratio, db_ratio_err, decompose_pair, fit_free_exponent, fit_power_law, CampaignResult,
    CellSummary, ScalingError, ScalingFit,
};
use crate::store::{cell_dir, ResultStore, StoreError};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Linear floor fit for one (channel, probe kind, pump setting).
#[derive(Debug, Clone)]
pub struct PsnRow {
    pub channel: Channel,
    pub probe_kind: ProbeKind,
    /// `None` = unpumped reference cells.
    pub p_pu: Option<f64>,
    pub fit: ScalingFit,
    pub exponent: Option<f64>,
    pub exponent_err: Option<f64>,
}

/// Pump-independence check of the floor at one probe power.
#[derive(Debug, Clone)]
pub struct PsnPumpRow {
    pub channel: Channel,
    pub probe_kind: ProbeKind,
    pub p_pr: f64,
    /// Constant (weighted-mean) fit across pump powers.
    pub mean_floor: f64,
    pub mean_err: f64,
    /// Linear fit across pump powers; a floor with no pump dependence has
    /// slope consistent with zero.
    pub slope: f64,
    pub slope_err: f64,
}

/// Quadratic fit of the spin-noise total for one (channel, probe kind),
/// with the linewidth's affine probe-power dependence.
#[derive(Debug, Clone)]
pub struct SpnRow {
    pub channel: Channel,
    pub probe_kind: ProbeKind,
    pub fit: ScalingFit,
    pub exponent: Option<f64>,
    pub exponent_err: Option<f64>,
    pub delta_f_slope: f64,
    pub delta_f_slope_err: f64,
    pub delta_f_intercept: f64,
    pub delta_f_intercept_err: f64,
}

/// Peak-height check: the Lorentzian peak grows sub-quadratically because
/// probe broadening spreads a quadratic total over a widening line.
#[derive(Debug, Clone)]
pub struct SpnPeakRow {
    pub channel: Channel,
    pub probe_kind: ProbeKind,
    /// Quadratic fit of peak height vs probe power, optionally excluding the
    /// top power.
    pub fit: ScalingFit,
    pub top_p_pr: f64,
    pub top_measured: f64,
    pub top_sigma: f64,
    pub top_extrapolated: f64,
    /// (extrapolated − measured) / sigma; positive when the peak falls short
    /// of the pure-quadratic extrapolation.
    pub deficit_sigmas: f64,
}

/// Cubic back-action fit for one (channel, probe kind, pump power).
#[derive(Debug, Clone)]
pub struct MbaRow {
    pub channel: Channel,
    pub probe_kind: ProbeKind,
    pub p_pu: f64,
    pub fit: ScalingFit,
    pub exponent: Option<f64>,
    pub exponent_err: Option<f64>,
    /// Cells whose back-action estimate came out negative (noise-dominated).
    pub n_negative: usize,
}

/// Quadratic pump dependence of the back-action total at the top probe
/// power.
#[derive(Debug, Clone)]
pub struct MbaPumpRow {
    pub channel: Channel,
    pub probe_kind: ProbeKind,
    pub p_pr: f64,
    pub fit: ScalingFit,
}

/// Cubic-coefficient ratio between a doubled pump power and its base.
#[derive(Debug, Clone)]
pub struct MbaRatioRow {
    pub channel: Channel,
    pub probe_kind: ProbeKind,
    pub pump_lo: f64,
    pub pump_hi: f64,
    pub ratio: f64,
    pub ratio_err: f64,
    pub expected: f64,
}

/// All scaling tables derived from one campaign.
#[derive(Debug, Clone, Default)]
pub struct ReportTables {
    pub psn: Vec<PsnRow>,
    pub psn_vs_pump: Vec<PsnPumpRow>,
    pub spn: Vec<SpnRow>,
    pub spn_peak: Vec<SpnPeakRow>,
    pub mba: Vec<MbaRow>,
    pub mba_vs_pump: Vec<MbaPumpRow>,
    pub mba_ratio: Vec<MbaRatioRow>,
}

fn kind_order(kind: ProbeKind) -> u8 {
    match kind {
        ProbeKind::Coherent => 0,
        ProbeKind::Squeezed => 1,
        ProbeKind::Antisqueezed => 2,
    }
}

fn channel_order(channel: Channel) -> u8 {
    match channel {
        Channel::Dc => 0,
        Channel::Rf => 1,
    }
}

fn sorted_unique(mut values: Vec<f64>) -> Vec<f64> {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    values.dedup();
    values
}

fn free_exponent_or_none(points: &[(f64, f64, f64)]) -> (Option<f64>, Option<f64>) {
    if points.len() < 4 {
        return (None, None);
    }
    match fit_free_exponent(points) {
        Ok((n, err)) => (Some(n), Some(err)),
        Err(_) => (None, None),
    }
}

fn attach_db(fit: &mut ScalingFit, reference: Option<&ScalingFit>) {
    if let Some(r) = reference {
        if let Ok(db) = db_ratio(fit.a_n, r.a_n) {
            fit.db_vs_coherent = Some(db);
            fit.db_err = Some(db_ratio_err(fit.a_n, fit.a_n_err, r.a_n, r.a_n_err));
        }
    }
}

/// Derives every scaling table from campaign cell summaries.
///
/// Groups with fewer than 3 probe powers (or pump powers, for the
/// pump-dependence tables) are skipped rather than fitted. With
/// `exclude_top_in_peak` the peak-height quadratic is fitted on the
/// low-power window (powers ≤ top/3 when at least 3 such points exist,
/// otherwise all points below the top), so the top point tests the
/// extrapolation from the regime where relaxation broadening is negligible.
pub fn build_tables(
    cells: &[CellSummary],
    exclude_top_in_peak: bool,
) -> Result<ReportTables, ScalingError> {
    let mut tables = ReportTables::default();
    let mut channels: Vec<Channel> = Vec::new();
    let mut kinds: Vec<ProbeKind> = Vec::new();
    for c in cells {
        if !channels.contains(&c.channel) {
            channels.push(c.channel);
        }
        if !kinds.contains(&c.probe_kind) {
            kinds.push(c.probe_kind);
        }
    }
    channels.sort_by_key(|c| channel_order(*c));
    kinds.sort_by_key(|k| kind_order(*k));
    let pumps = sorted_unique(cells.iter().filter_map(|c| c.p_pu).collect());
    let probe_powers = sorted_unique(cells.iter().map(|c| c.p_pr).collect());

    for &channel in &channels {
        // --- PSN: floor vs probe power, one fit per pump setting ---------
        let mut pump_settings: Vec<Option<f64>> = Vec::new();
        if cells.iter().any(|c| c.channel == channel && !c.polarized) {
            pump_settings.push(None);
        }
        pump_settings.extend(pumps.iter().map(|&p| Some(p)));
        for &p_pu in &pump_settings {
            let mut coherent_fit: Option<ScalingFit> = None;
            for &kind in &kinds {
                let points: Vec<(f64, f64, f64)> = cells
                    .iter()
                    .filter(|c| c.channel == channel && c.probe_kind == kind && c.p_pu == p_pu)
                    .map(|c| (c.p_pr, c.floor_detected, c.floor_sigma))
                    .collect();
                if points.len() < 3 {
                    continue;
                }
                let mut fit = fit_power_law(&points, 1)?;
                attach_db(&mut fit, coherent_fit.as_ref());
                if kind == ProbeKind::Coherent {
                    coherent_fit = Some(fit.clone());
                }
                let (exponent, exponent_err) = free_exponent_or_none(&points);
                tables.psn.push(PsnRow { channel, probe_kind: kind, p_pu, fit, exponent, exponent_err });
            }
        }

        // --- PSN pump independence at each probe power --------------------
        if pumps.len() >= 3 {
            for &kind in &kinds {
                for &p_pr in &probe_powers {
                    let points: Vec<(f64, f64, f64)> = cells
                        .iter()
                        .filter(|c| {
                            c.channel == channel
                                && c.probe_kind == kind
                                && c.polarized
                                && c.p_pr == p_pr
                        })
                        .map(|c| (c.p_pu.unwrap_or(0.0), c.floor_detected, c.floor_sigma))
                        .collect();
                    if points.len() < 3 {
                        continue;
                    }
                    let constant = fit_power_law(&points, 0)?;
                    let linear = fit_power_law(&points, 1)?;
                    tables.psn_vs_pump.push(PsnPumpRow {
                        channel,
                        probe_kind: kind,
                        p_pr,
                        mean_floor: constant.a0,
                        mean_err: constant.a0_err,
                        slope: linear.a_n,
                        slope_err: linear.a_n_err,
                    });
                }
            }
        }

        // --- SPN: quadratic total + affine linewidth on unpumped cells ---
        let mut coherent_spn: Option<ScalingFit> = None;
        for &kind in &kinds {
            let unpol: Vec<&CellSummary> = cells
                .iter()
                .filter(|c| c.channel == channel && c.probe_kind == kind && !c.polarized)
                .collect();
            if unpol.len() < 3 {
                continue;
            }
            let totals: Vec<(f64, f64, f64)> = unpol
                .iter()
                .map(|c| (c.p_pr, c.atomic_total, c.atomic_total_sigma))
                .collect();
            let mut fit = fit_power_law(&totals, 2)?;
            attach_db(&mut fit, coherent_spn.as_ref());
            if kind == ProbeKind::Coherent {
                coherent_spn = Some(fit.clone());
            }
            let (exponent, exponent_err) = free_exponent_or_none(&totals);
            let widths: Vec<(f64, f64, f64)> = unpol
                .iter()
                .map(|c| {
                    let sigma = (0.5 * (c.bootstrap.delta_f[2] - c.bootstrap.delta_f[0]))
                        .abs()
                        .max(1e-6 * c.fit.delta_f.abs() + 1e-300);
                    (c.p_pr, c.fit.delta_f, sigma)
                })
                .collect();
            let width_fit = fit_power_law(&widths, 1)?;
            tables.spn.push(SpnRow {
                channel,
                probe_kind: kind,
                fit,
                exponent,
                exponent_err,
                delta_f_slope: width_fit.a_n,
                delta_f_slope_err: width_fit.a_n_err,
                delta_f_intercept: width_fit.a0,
                delta_f_intercept_err: width_fit.a0_err,
            });

            // Peak-height sub-quadratic check.
            let peaks: Vec<(f64, f64, f64)> = unpol
                .iter()
                .map(|c| {
                    let sigma = (0.5 * (c.bootstrap.s_atomic[2] - c.bootstrap.s_atomic[0]))
                        .abs()
                        .max(1e-6 * c.fit.s_atomic.abs() + 1e-300);
                    (c.p_pr, c.fit.s_atomic, sigma)
                })
                .collect();
            let top_p = peaks.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let top = *peaks
                .iter()
                .find(|p| p.0 == top_p)
                .expect("top probe power present");
            // The quadratic reference is fitted where relaxation broadening is
            // negligible: the low-power window (≤ top/3) when it holds enough
            // points, otherwise everything below the top power.
            let fit_points: Vec<(f64, f64, f64)> = if exclude_top_in_peak {
                let window: Vec<(f64, f64, f64)> = peaks
                    .iter()
                    .filter(|p| p.0 <= top_p / 3.0)
                    .cloned()
                    .collect();
                if window.len() >= 3 {
                    window
                } else {
                    peaks.iter().filter(|p| p.0 != top_p).cloned().collect()
                }
            } else {
                peaks.clone()
            };
            if fit_points.len() >= 3 {
                let peak_fit = fit_power_law(&fit_points, 2)?;
                let extrapolated = peak_fit.a0 + peak_fit.a_n * top_p.powi(2);
                let extrap_sigma = (peak_fit.a0_err.powi(2)
                    + (peak_fit.a_n_err * top_p.powi(2)).powi(2))
                .sqrt();
                let deficit_sigmas =
                    (extrapolated - top.1) / (top.2.powi(2) + extrap_sigma.powi(2)).sqrt();
                tables.spn_peak.push(SpnPeakRow {
                    channel,
                    probe_kind: kind,
                    fit: peak_fit,
                    top_p_pr: top_p,
                    top_measured: top.1,
                    top_sigma: top.2,
                    top_extrapolated: extrapolated,
                    deficit_sigmas,
                });
            }
        }

        // --- MBA: cubic in probe power per pump, quadratic in pump -------
        for &kind in &kinds {
            let mut per_pump_fits: Vec<(f64, ScalingFit)> = Vec::new();
            for &p_pu in &pumps {
                let mut points = Vec::new();
                let mut n_negative = 0usize;
                for &p_pr in &probe_powers {
                    let pol = cells.iter().find(|c| {
                        c.channel == channel
                            && c.probe_kind == kind
                            && c.p_pr == p_pr
                            && c.p_pu == Some(p_pu)
                    });
                    let unpol = cells.iter().find(|c| {
                        c.channel == channel
                            && c.probe_kind == kind
                            && c.p_pr == p_pr
                            && !c.polarized
                    });
                    if let (Some(pol), Some(unpol)) = (pol, unpol) {
                        let mba = decompose_pair(pol, unpol)?;
                        if mba.negative {
                            n_negative += 1;
                        }
                        points.push((p_pr, mba.total, mba.std_error));
                    }
                }
                if points.len() < 3 {
                    continue;
                }
                let mut fit = fit_power_law(&points, 3)?;
                let reference = tables
                    .mba
                    .iter()
                    .find(|r| {
                        r.channel == channel
                            && r.probe_kind == ProbeKind::Coherent
                            && r.p_pu == p_pu
                    })
                    .map(|r| r.fit.clone());
                attach_db(&mut fit, reference.as_ref());
                let (exponent, exponent_err) = free_exponent_or_none(&points);
                per_pump_fits.push((p_pu, fit.clone()));
                tables.mba.push(MbaRow {
                    channel,
                    probe_kind: kind,
                    p_pu,
                    fit,
                    exponent,
                    exponent_err,
                    n_negative,
                });
            }

            // Doubled-pump cubic-coefficient ratios.
            for (p_lo, fit_lo) in &per_pump_fits {
                for (p_hi, fit_hi) in &per_pump_fits {
                    if (p_hi - 2.0 * p_lo).abs() < 1e-9 * p_lo.max(1.0) && fit_lo.a_n > 0.0 {
                        let ratio = fit_hi.a_n / fit_lo.a_n;
                        let ratio_err = ratio
                            * ((fit_hi.a_n_err / fit_hi.a_n).powi(2)
                                + (fit_lo.a_n_err / fit_lo.a_n).powi(2))
                            .sqrt()
                            .abs();
                        tables.mba_ratio.push(MbaRatioRow {
                            channel,
                            probe_kind: kind,
                            pump_lo: *p_lo,
                            pump_hi: *p_hi,
                            ratio,
                            ratio_err,
                            expected: (p_hi / p_lo).powi(2),
                        });
                    }
                }
            }

            // Pump-quadratic at the top probe power.
            if pumps.len() >= 3 {
                if let Some(&top_p) = probe_powers.last() {
                    let mut points = Vec::new();
                    for &p_pu in &pumps {
                        let pol = cells.iter().find(|c| {
                            c.channel == channel
                                && c.probe_kind == kind
                                && c.p_pr == top_p
                                && c.p_pu == Some(p_pu)
                        });
                        let unpol = cells.iter().find(|c| {
                            c.channel == channel
                                && c.probe_kind == kind
                                && c.p_pr == top_p
                                && !c.polarized
                        });
                        if let (Some(pol), Some(unpol)) = (pol, unpol) {
                            let mba = decompose_pair(pol, unpol)?;
                            points.push((p_pu, mba.total, mba.std_error));
                        }
                    }
                    if points.len() >= 3 {
                        let fit = fit_power_law(&points, 2)?;
                        tables.mba_vs_pump.push(MbaPumpRow {
                            channel,
                            probe_kind: kind,
                            p_pr: top_p,
                            fit,
                        });
                    }
                }
            }
        }
    }
    Ok(tables)
}

// ---------------------------------------------------------------------------
// CSV rendering
// ---------------------------------------------------------------------------

fn opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v}"),
        None => "---".into(),
    }
}

pub fn psn_csv(rows: &[PsnRow]) -> String {
    let mut out = String::from(
        "channel,probe_kind,pump_uw,slope_uv2_hz_mw,slope_err,offset_uv2_hz,offset_err,\
         exponent,exponent_err,db_vs_coherent,db_err\n",
    );
    for r in rows {
        let pump = r.p_pu.map(|p| format!("{p}")).unwrap_or_else(|| "unpumped".into());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.channel.label(),
            r.probe_kind.label(),
            pump,
            r.fit.a_n,
            r.fit.a_n_err,
            r.fit.a0,
            r.fit.a0_err,
            opt(r.exponent),
            opt(r.exponent_err),
            opt(r.fit.db_vs_coherent),
            opt(r.fit.db_err),
        );
    }
    out
}

pub fn psn_vs_pump_csv(rows: &[PsnPumpRow]) -> String {
    let mut out = String::from(
        "channel,probe_kind,p_pr_mw,mean_floor_uv2_hz,mean_err,slope_uv2_hz_uw,slope_err\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.channel.label(),
            r.probe_kind.label(),
            r.p_pr,
            r.mean_floor,
            r.mean_err,
            r.slope,
            r.slope_err,
        );
    }
    out
}

pub fn spn_csv(rows: &[SpnRow]) -> String {
    let mut out = String::from(
        "channel,probe_kind,a2_uv2_mw2,a2_err,offset_uv2,offset_err,exponent,exponent_err,\
         delta_f_slope_hz_mw,delta_f_slope_err,delta_f_intercept_hz,delta_f_intercept_err,\
         db_vs_coherent,db_err\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.channel.label(),
            r.probe_kind.label(),
            r.fit.a_n,
            r.fit.a_n_err,
            r.fit.a0,
            r.fit.a0_err,
            opt(r.exponent),
            opt(r.exponent_err),
            r.delta_f_slope,
            r.delta_f_slope_err,
            r.delta_f_intercept,
            r.delta_f_intercept_err,
            opt(r.fit.db_vs_coherent),
            opt(r.fit.db_err),
        );
    }
    out
}

pub fn spn_peak_csv(rows: &[SpnPeakRow]) -> String {
    let mut out = String::from(
        "channel,probe_kind,peak_a2_uv2_hz_mw2,peak_a2_err,offset_uv2_hz,offset_err,\
         top_p_pr_mw,top_measured_uv2_hz,top_sigma,top_extrapolated_uv2_hz,deficit_sigmas\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.channel.label(),
            r.probe_kind.label(),
            r.fit.a_n,
            r.fit.a_n_err,
            r.fit.a0,
            r.fit.a0_err,
            r.top_p_pr,
            r.top_measured,
            r.top_sigma,
            r.top_extrapolated,
            r.deficit_sigmas,
        );
    }
    out
}

pub fn mba_csv(rows: &[MbaRow]) -> String {
    let mut out = String::from(
        "channel,probe_kind,pump_uw,a3_uv2_mw3,a3_err,offset_uv2,offset_err,exponent,\
         exponent_err,n_negative,db_vs_coherent,db_err\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.channel.label(),
            r.probe_kind.label(),
            r.p_pu,
            r.fit.a_n,
            r.fit.a_n_err,
            r.fit.a0,
            r.fit.a0_err,
            opt(r.exponent),
            opt(r.exponent_err),
            r.n_negative,
            opt(r.fit.db_vs_coherent),
            opt(r.fit.db_err),
        );
    }
    out
}

pub fn mba_vs_pump_csv(rows: &[MbaPumpRow]) -> String {
    let mut out = String::from(
        "channel,probe_kind,p_pr_mw,quad_uv2_uw2,quad_err,offset_uv2,offset_err\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.channel.label(),
            r.probe_kind.label(),
            r.p_pr,
            r.fit.a_n,
            r.fit.a_n_err,
            r.fit.a0,
            r.fit.a0_err,
        );
    }
    out
}

pub fn mba_ratio_csv(rows: &[MbaRatioRow]) -> String {
    let mut out = String::from(
        "channel,probe_kind,pump_lo_uw,pump_hi_uw,a3_ratio,a3_ratio_err,ratio_expected\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.channel.label(),
            r.probe_kind.label(),
            r.pump_lo,
            r.pump_hi,
            r.ratio,
            r.ratio_err,
            r.expected,
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Figure data
// ---------------------------------------------------------------------------

fn figure_floor_csv(cells: &[CellSummary], channel: Channel) -> String {
    let mut out = String::from("probe_kind,p_pr_mw,pump_uw,floor_uv2_hz,sigma\n");
    for c in cells.iter().filter(|c| c.channel == channel) {
        let pump = c.p_pu.map(|p| format!("{p}")).unwrap_or_else(|| "unpumped".into());
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            c.probe_kind.label(),
            c.p_pr,
            pump,
            c.floor_detected,
            c.floor_sigma
        );
    }
    out
}

fn figure_spn_csv(cells: &[CellSummary], channel: Channel) -> String {
    let mut out =
        String::from("probe_kind,p_pr_mw,total_uv2,sigma,delta_f_hz,delta_f_sigma\n");
    for c in cells.iter().filter(|c| c.channel == channel && !c.polarized) {
        let df_sigma = (0.5 * (c.bootstrap.delta_f[2] - c.bootstrap.delta_f[0])).abs();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            c.probe_kind.label(),
            c.p_pr,
            c.atomic_total,
            c.atomic_total_sigma,
            c.fit.delta_f,
            df_sigma
        );
    }
    out
}

fn figure_mba_csv(cells: &[CellSummary], channel: Channel) -> Result<String, ScalingError> {
    let mut out = String::from("probe_kind,p_pr_mw,pump_uw,total_uv2,sigma,negative\n");
    for pol in cells.iter().filter(|c| c.channel == channel && c.polarized) {
        let unpol = cells.iter().find(|c| {
            c.channel == channel
                && c.probe_kind == pol.probe_kind
                && c.p_pr == pol.p_pr
                && !c.polarized
        });
        if let Some(unpol) = unpol {
            let mba = decompose_pair(pol, unpol)?;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                pol.probe_kind.label(),
                pol.p_pr,
                pol.p_pu.unwrap_or(0.0),
                mba.total,
                mba.std_error,
                u8::from(mba.negative)
            );
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Store layout
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
    #[error("serialization failed: {0}")]
    Serialize(String),
    #[error("result directory {0} has no campaign summaries (fits/cells.json)")]
    NoCells(String),
}

pub const CELLS_PATH: &str = "fits/cells.json";
pub const FAILURES_PATH: &str = "fits/failures.json";
pub const CONFIG_PATH: &str = "config.toml";

/// Persists a finished campaign: resolved config, per-cell spectra, fitted
/// summaries, failures, and the checksum manifest (written last).
pub fn write_sweep(
    cfg: &RunConfig,
    result: &CampaignResult,
    root: impl Into<PathBuf>,
) -> Result<PathBuf, ReportError> {
    let mut store = ResultStore::create(root)?;
    let config_text =
        serialize_config(cfg).map_err(|e| ReportError::Serialize(e.to_string()))?;
    store.write_string(CONFIG_PATH, &config_text)?;
    for cell in &result.cells {
        if let Some(spectrum) = &cell.spectrum {
            let dir = cell_dir(cell.channel, cell.probe_kind, cell.p_pr, cell.p_pu);
            store.write_string(&format!("{dir}/spectrum.csv"), &spectrum_csv(spectrum))?;
            store.write_string(
                &format!("{dir}/spectrum.meta.json"),
                &spectrum_meta_json(spectrum)
                    .map_err(|e| ReportError::Serialize(e.to_string()))?,
            )?;
        }
    }
    let cells_json = serde_json::to_string_pretty(&result.cells)
        .map_err(|e| ReportError::Serialize(e.to_string()))?;
    store.write_string(CELLS_PATH, &(cells_json + "\n"))?;
    let failures_json = serde_json::to_string_pretty(&result.failures)
        .map_err(|e| ReportError::Serialize(e.to_string()))?;
    store.write_string(FAILURES_PATH, &(failures_json + "\n"))?;
    store.finalize()?;
    Ok(store.root().to_path_buf())
}

/// Loads the fitted summaries of a previous sweep.
pub fn load_cells(root: impl AsRef<Path>) -> Result<Vec<CellSummary>, ReportError> {
    let path = root.as_ref().join(CELLS_PATH);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ReportError::NoCells(root.as_ref().display().to_string())
        } else {
            ReportError::Store(StoreError::Io { path: path.display().to_string(), source: e })
        }
    })?;
    serde_json::from_str(&text).map_err(|e| ReportError::Serialize(e.to_string()))
}

/// Renders the scaling tables and figure data into an existing sweep store,
/// extending its manifest.
pub fn write_report(
    cells: &[CellSummary],
    tables: &ReportTables,
    root: impl Into<PathBuf>,
) -> Result<(), ReportError> {
    let mut store = ResultStore::load(root)?;
    store.write_string("tables/psn_linear.csv", &psn_csv(&tables.psn))?;
    store.write_string("tables/psn_vs_pump.csv", &psn_vs_pump_csv(&tables.psn_vs_pump))?;
    store.write_string("tables/spn_quadratic.csv", &spn_csv(&tables.spn))?;
    store.write_string("tables/spn_peak.csv", &spn_peak_csv(&tables.spn_peak))?;
    store.write_string("tables/mba_cubic.csv", &mba_csv(&tables.mba))?;
    store.write_string("tables/mba_vs_pump.csv", &mba_vs_pump_csv(&tables.mba_vs_pump))?;
    store.write_string("tables/mba_ratio.csv", &mba_ratio_csv(&tables.mba_ratio))?;
    let mut channels: Vec<Channel> = Vec::new();
    for c in cells {
        if !channels.contains(&c.channel) {
            channels.push(c.channel);
        }
    }
    channels.sort_by_key(|c| channel_order(*c));
    for channel in channels {
        let label = channel.label();
        store.write_string(
            &format!("figures/psn_floor_{label}.csv"),
            &figure_floor_csv(cells, channel),
        )?;
        store.write_string(
            &format!("figures/spn_total_{label}.csv"),
            &figure_spn_csv(cells, channel),
        )?;
        store.write_string(
            &format!("figures/mba_total_{label}.csv"),
            &figure_mba_csv(cells, channel)?,
        )?;
    }
    store.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{BootstrapResult, FitError};
    use crate::scaling::FitSummary;

    /// Builds a plausible summary without running a simulation.
    fn fake_cell(
        channel: Channel,
        kind: ProbeKind,
        p_pr: f64,
        p_pu: Option<f64>,
        floor: f64,
        total: f64,
        delta_f: f64,
    ) -> CellSummary {
        let s_atomic = total / (delta_f * std::f64::consts::FRAC_PI_2);
        let rel = 0.02;
        CellSummary {
            probe_kind: kind,
            channel,
            p_pr,
            p_pu,
            polarized: p_pu.is_some(),
            xibar2: 1.0,
            fit: FitSummary {
                s_psn: floor,
                s_atomic,
                delta_f,
                xi2: 1.0,
                loglik: 0.0,
                n_used: 120,
                k_eff: 150.0,
                degenerate: false,
            },
            bootstrap: BootstrapResult {
                n_boot: 10,
                n_diverged: 0,
                s_psn: [floor * (1.0 - rel), floor, floor * (1.0 + rel)],
                s_atomic: [s_atomic * (1.0 - rel), s_atomic, s_atomic * (1.0 + rel)],
                delta_f: [delta_f * (1.0 - rel), delta_f, delta_f * (1.0 + rel)],
                atomic_total: [total * (1.0 - rel), total, total * (1.0 + rel)],
                replicas: Vec::new(),
            },
            spectrum: None,
            floor_detected: floor,
            floor_sigma: (floor * rel).max(1e-9),
            atomic_total: total,
            atomic_total_sigma: (total * rel).max(1e-9),
        }
    }

    /// Synthetic campaign following exact scaling laws, so every fitted
    /// coefficient is known.
    fn synthetic_cells() -> Vec<CellSummary> {
        let mut cells = Vec::new();
        let probe = [0.5f64, 1.0, 1.5, 2.0, 2.5, 3.0];
        let pumps = [5.0f64, 10.0];
        for &p in &probe {
            for (kind, xi2) in [
                (ProbeKind::Coherent, 1.0),
                (ProbeKind::Squeezed, 0.76),
                (ProbeKind::Antisqueezed, 1.85),
            ] {
                let floor = 19.59 * xi2 * p;
                let spn = 1853.0 * p * p;
                let df = (1100.0 + 300.0 * p) / std::f64::consts::TAU;
                cells.push(fake_cell(Channel::Dc, kind, p, None, floor, spn, df));
                for &pu in &pumps {
                    let mba = 320.0 * p.powi(3) * (pu / 10.0).powi(2);
                    cells.push(fake_cell(
                        Channel::Dc,
                        kind,
                        p,
                        Some(pu),
                        floor,
                        spn + mba,
                        df * 1.05,
                    ));
                }
            }
        }
        cells
    }

    #[test]
    fn tables_recover_injected_scaling_laws() {
        let cells = synthetic_cells();
        let tables = build_tables(&cells, true).unwrap();

        // PSN: coherent slope 19.59, squeezed/antisqueezed dB shifts.
        let coh = tables
            .psn
            .iter()
            .find(|r| r.probe_kind == ProbeKind::Coherent && r.p_pu.is_none())
            .unwrap();
        assert!((coh.fit.a_n - 19.59).abs() < 0.05, "a1 = {}", coh.fit.a_n);
        assert!((coh.exponent.unwrap() - 1.0).abs() < 0.02);
        let sq = tables
            .psn
            .iter()
            .find(|r| r.probe_kind == ProbeKind::Squeezed && r.p_pu.is_none())
            .unwrap();
        let db = sq.fit.db_vs_coherent.unwrap();
        assert!((db - 10.0 * 0.76_f64.log10()).abs() < 0.05, "db = {db}");

        // SPN: quadratic coefficient and linewidth slope.
        let spn = tables
            .spn
            .iter()
            .find(|r| r.probe_kind == ProbeKind::Coherent)
            .unwrap();
        assert!((spn.fit.a_n - 1853.0).abs() / 1853.0 < 0.02, "a2 = {}", spn.fit.a_n);
        assert!((spn.exponent.unwrap() - 2.0).abs() < 0.05);
        let expected_slope = 300.0 / std::f64::consts::TAU;
        assert!(
            (spn.delta_f_slope - expected_slope).abs() / expected_slope < 0.05,
            "slope = {}",
            spn.delta_f_slope
        );

        // Peak sub-quadratic: synthetic peaks grow as P^2/(Gamma0 + alpha P),
        // so the top point must fall below the quadratic extrapolation.
        let peak = tables
            .spn_peak
            .iter()
            .find(|r| r.probe_kind == ProbeKind::Coherent)
            .unwrap();
        assert!(
            peak.deficit_sigmas > 2.0,
            "expected a clear sub-quadratic deficit, got {} sigma",
            peak.deficit_sigmas
        );

        // MBA: cubic coefficient, pump ratio 4, pump-quadratic coefficient.
        let mba10 = tables
            .mba
            .iter()
            .find(|r| r.probe_kind == ProbeKind::Coherent && r.p_pu == 10.0)
            .unwrap();
        assert!((mba10.fit.a_n - 320.0).abs() / 320.0 < 0.05, "a3 = {}", mba10.fit.a_n);
        assert!((mba10.exponent.unwrap() - 3.0).abs() < 0.1);
        assert_eq!(mba10.n_negative, 0);
        let ratio = tables
            .mba_ratio
            .iter()
            .find(|r| r.probe_kind == ProbeKind::Coherent)
            .unwrap();
        assert!((ratio.ratio - 4.0).abs() < 0.2, "ratio = {}", ratio.ratio);
        assert_eq!(ratio.expected, 4.0);
        let pump_quad = tables
            .mba_vs_pump
            .iter()
            .find(|r| r.probe_kind == ProbeKind::Coherent);
        // Only two pump powers here, so the pump-quadratic table is empty.
        assert!(pump_quad.is_none());
    }

    #[test]
    fn csv_rendering_is_complete_and_marks_missing_values() {
        let cells = synthetic_cells();
        let tables = build_tables(&cells, true).unwrap();
        let psn = psn_csv(&tables.psn);
        assert!(psn.lines().count() == tables.psn.len() + 1);
        // The coherent reference row has no dB entry.
        let coh_line = psn.lines().find(|l| l.contains("coherent,unpumped")).unwrap();
        assert!(coh_line.ends_with("---,---"), "line: {coh_line}");
        let spn = spn_csv(&tables.spn);
        assert_eq!(spn.lines().count(), tables.spn.len() + 1);
        let mba = mba_csv(&tables.mba);
        assert_eq!(mba.lines().count(), tables.mba.len() + 1);
    }

    #[test]
    fn sweep_store_round_trips_summaries() {
        use crate::scaling::{CampaignResult, CellFailure, CellSpec};
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let cells = synthetic_cells();
        let result = CampaignResult {
            cells: cells.clone(),
            failures: vec![CellFailure {
                spec: CellSpec {
                    probe_kind: ProbeKind::Coherent,
                    p_pr: 1.0,
                    p_pu: 5.0,
                    polarized: true,
                    replicate: 0,
                },
                error: FitError::Config("example".into()).to_string(),
            }],
        };
        let root = write_sweep(&cfg, &result, dir.path().join("out")).unwrap();
        let reloaded = load_cells(&root).unwrap();
        assert_eq!(reloaded.len(), cells.len());
        assert!(reloaded.iter().all(|c| c.spectrum.is_none()));
        assert_eq!(reloaded[0].p_pr, cells[0].p_pr);
        assert_eq!(reloaded[0].fit.delta_f, cells[0].fit.delta_f);

        // Report extends the same store; the manifest then covers everything.
        let tables = build_tables(&reloaded, true).unwrap();
        write_report(&reloaded, &tables, &root).unwrap();
        let manifest = crate::store::verify_store(&root).unwrap();
        assert!(manifest.artifacts.contains_key("tables/psn_linear.csv"));
        assert!(manifest.artifacts.contains_key("fits/cells.json"));
        assert!(manifest.artifacts.contains_key("figures/mba_total_dc.csv"));
    }
}
