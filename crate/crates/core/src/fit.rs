//! Maximum-likelihood spectral fitting and noise-budget decomposition.
//!
//! Demodulated spectra are modeled as a flat detected photon-shot-noise floor
//! plus a zero-centered Lorentzian carrying the atomic noise:
//!
//! ```text
//! S(f) = xi2 * S_psn + S_atomic * L(f; delta_f),   L = delta_f^2 / (f^2 + delta_f^2)
//! ```
//!
//! Averaged Welch bins are Gamma-distributed around the model PSD with shape
//! equal to the effective segment count, so the fit maximizes the Whittle
//! (Gamma) likelihood rather than least squares, which would bias the
//! linewidth at low averages. Decomposition follows the subtraction scheme:
//! the unpolarized atomic total is spin-projection noise; the polarized
//! atomic total minus that is measurement back-action, reported without
//! clamping when the subtraction goes negative.

use crate::dsp::{effective_segments, SpectrumMeta, SpectrumRecord};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid fit setup: {0}")]
    Config(String),
    #[error("spectrum has {n_unmasked} unmasked bins; at least {needed} required")]
    InsufficientData { n_unmasked: usize, needed: usize },
    #[error("optimizer failed to converge within {iters} iterations")]
    NonConvergence { iters: usize },
    #[error("{diverged} of {total} bootstrap replicas diverged (> 20% limit)")]
    BootstrapUnstable { diverged: usize, total: usize },
}

/// Unit-peak Lorentzian with half-width `delta_f`.
#[inline]
pub fn lorentzian(f: f64, delta_f: f64) -> f64 {
    let d2 = delta_f * delta_f;
    d2 / (f * f + d2)
}

/// Total power of the Lorentzian component over positive frequencies:
/// `S_atomic * delta_f * pi / 2`.
pub fn total_power(s_atomic: f64, delta_f: f64) -> f64 {
    s_atomic * delta_f * PI / 2.0
}

/// Spectral model: detected flat floor plus atomic Lorentzian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseFitModel {
    /// Flat photon-shot-noise level before squeezing, uV^2/Hz.
    pub s_psn: f64,
    /// Lorentzian peak level, uV^2/Hz.
    pub s_atomic: f64,
    /// Lorentzian half-width, Hz.
    pub delta_f: f64,
    /// Detected-quadrature squeezing factor multiplying the floor; held
    /// fixed during fitting (known from the probe state, not a free
    /// parameter).
    pub xi2: f64,
}

impl NoiseFitModel {
    pub fn validate(&self) -> Result<(), FitError> {
        if !(self.s_psn >= 0.0 && self.s_atomic >= 0.0 && self.delta_f > 0.0 && self.xi2 > 0.0) {
            return Err(FitError::Config(format!(
                "model requires s_psn >= 0, s_atomic >= 0, delta_f > 0, xi2 > 0; \
                 got ({}, {}, {}, {})",
                self.s_psn, self.s_atomic, self.delta_f, self.xi2
            )));
        }
        Ok(())
    }

    /// Model PSD at frequency `f`.
    #[inline]
    pub fn evaluate(&self, f: f64) -> f64 {
        self.xi2 * self.s_psn + self.s_atomic * lorentzian(f, self.delta_f)
    }

    /// Detected flat level `xi2 * s_psn`.
    pub fn floor(&self) -> f64 {
        self.xi2 * self.s_psn
    }
}

/// Result of a maximum-likelihood spectral fit.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub model: NoiseFitModel,
    /// Whittle log-likelihood at the optimum (additive constants dropped).
    pub loglik: f64,
    /// Number of unmasked bins used.
    pub n_used: usize,
    /// Effective Gamma shape (independent-average count) assumed per bin.
    pub k_eff: f64,
    /// Covariance of (s_psn, s_atomic, delta_f) in linear parameter space.
    pub cov: [[f64; 3]; 3],
    /// True when the spectrum is consistent with a flat floor only, leaving
    /// the linewidth unidentifiable; the returned model then has
    /// `s_atomic = 0` and `delta_f` copied from the initial guess.
    pub degenerate: bool,
    pub n_iter: usize,
}

impl FitResult {
    pub fn std_errors(&self) -> [f64; 3] {
        [
            self.cov[0][0].max(0.0).sqrt(),
            self.cov[1][1].max(0.0).sqrt(),
            self.cov[2][2].max(0.0).sqrt(),
        ]
    }
}

fn unmasked_bins(record: &SpectrumRecord) -> Vec<(f64, f64)> {
    record
        .freqs
        .iter()
        .zip(&record.psd)
        .zip(&record.mask)
        .filter(|((_, &p), &m)| !m && p > 0.0 && p.is_finite())
        .map(|((&f, &p), _)| (f, p))
        .collect()
}

/// Derivative-free starting point: the floor from the top-quartile
/// frequencies, the peak excess from the lowest frequencies, and the
/// half-fall point of the excess for the width.
pub fn suggest_init(record: &SpectrumRecord, xi2: f64) -> Result<NoiseFitModel, FitError> {
    let bins = unmasked_bins(record);
    if bins.len() < 8 {
        return Err(FitError::InsufficientData { n_unmasked: bins.len(), needed: 8 });
    }
    let f_lo = bins.first().unwrap().0;
    let f_hi = bins.last().unwrap().0;
    let span = (f_hi - f_lo).max(f64::MIN_POSITIVE);
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let floor = median(
        bins.iter().filter(|(f, _)| *f >= f_lo + 0.75 * span).map(|&(_, p)| p).collect(),
    );
    let head: Vec<f64> = {
        let mut h: Vec<f64> =
            bins.iter().filter(|(f, _)| *f <= f_lo + 0.05 * span).map(|&(_, p)| p).collect();
        if h.len() < 3 {
            h = bins.iter().take(3).map(|&(_, p)| p).collect();
        }
        h
    };
    let peak = median(head);
    let s_atomic = (peak - floor).max(0.05 * floor);
    // Running mean over 5 bins; width = first crossing below half excess.
    let half = floor + 0.5 * s_atomic;
    let mut delta_f = span / 10.0;
    for i in 0..bins.len() {
        let lo = i.saturating_sub(2);
        let hi = (i + 3).min(bins.len());
        let avg = bins[lo..hi].iter().map(|&(_, p)| p).sum::<f64>() / (hi - lo) as f64;
        if avg <= half && bins[i].0 > f_lo {
            delta_f = bins[i].0;
            break;
        }
    }
    let df_grid = record.df().max(f64::MIN_POSITIVE);
    let delta_f = delta_f.clamp(2.0 * df_grid, span);
    Ok(NoiseFitModel { s_psn: (floor / xi2).max(f64::MIN_POSITIVE), s_atomic, delta_f, xi2 })
}

/// Whittle log-likelihood (constants dropped): each bin is Gamma with shape
/// `k_eff` and mean equal to the model PSD.
fn whittle_loglik(bins: &[(f64, f64)], model: &NoiseFitModel, k_eff: f64) -> f64 {
    let mut acc = 0.0;
    for &(f, p) in bins {
        let mu = model.evaluate(f);
        if !(mu > 0.0) {
            return f64::NEG_INFINITY;
        }
        acc += mu.ln() + p / mu;
    }
    -k_eff * acc
}

/// Closed-form flat-only MLE: mean level and its log-likelihood.
fn flat_mle(bins: &[(f64, f64)], k_eff: f64) -> (f64, f64) {
    let mean = bins.iter().map(|&(_, p)| p).sum::<f64>() / bins.len() as f64;
    let ll = -k_eff * bins.iter().map(|&(_, p)| mean.ln() + p / mean).sum::<f64>();
    (mean, ll)
}

const NM_MAX_ITER: usize = 1200;

/// Nelder–Mead minimizer over 3 parameters; returns (best point, best value,
/// iterations, converged flag).
fn nelder_mead<F: FnMut(&[f64; 3]) -> f64>(
    mut f: F,
    x0: [f64; 3],
    step: f64,
) -> ([f64; 3], f64, usize, bool) {
    let mut simplex: Vec<[f64; 3]> = vec![x0; 4];
    for i in 0..3 {
        simplex[i + 1][i] += step;
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| f(x)).collect();
    let mut iter = 0;
    let mut converged = false;
    while iter < NM_MAX_ITER {
        iter += 1;
        // Order simplex by value.
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
        let best = order[0];
        let worst = order[3];
        let second_worst = order[2];
        if (values[worst] - values[best]).abs()
            <= 1e-11 * (values[best].abs() + 1e-11)
        {
            converged = true;
            break;
        }
        // Centroid of all but the worst.
        let mut centroid = [0.0; 3];
        for &i in order.iter().take(3) {
            for d in 0..3 {
                centroid[d] += simplex[i][d] / 3.0;
            }
        }
        let reflect = |t: f64| -> [f64; 3] {
            let mut x = [0.0; 3];
            for d in 0..3 {
                x[d] = centroid[d] + t * (centroid[d] - simplex[worst][d]);
            }
            x
        };
        let xr = reflect(1.0);
        let fr = f(&xr);
        if fr < values[best] {
            let xe = reflect(2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[worst] = xe;
                values[worst] = fe;
            } else {
                simplex[worst] = xr;
                values[worst] = fr;
            }
        } else if fr < values[second_worst] {
            simplex[worst] = xr;
            values[worst] = fr;
        } else {
            let xc = reflect(-0.5);
            let fc = f(&xc);
            if fc < values[worst] {
                simplex[worst] = xc;
                values[worst] = fc;
            } else {
                // Shrink toward the best vertex.
                let xb = simplex[best];
                for i in 0..4 {
                    if i == best {
                        continue;
                    }
                    for d in 0..3 {
                        simplex[i][d] = xb[d] + 0.5 * (simplex[i][d] - xb[d]);
                    }
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let mut best = 0;
    for i in 1..4 {
        if values[i] < values[best] {
            best = i;
        }
    }
    (simplex[best], values[best], iter, converged)
}

/// Inverts a symmetric 3x3 matrix; `None` if singular.
fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if !det.is_finite() || det.abs() < 1e-300 {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b, c, d) = (
                m[(i + 1) % 3][(j + 1) % 3],
                m[(i + 1) % 3][(j + 2) % 3],
                m[(i + 2) % 3][(j + 1) % 3],
                m[(i + 2) % 3][(j + 2) % 3],
            );
            // Cofactor expansion with transposition baked in.
            out[j][i] = (a * d - b * c) * inv_det;
        }
    }
    Some(out)
}

fn model_from_log(theta: &[f64; 3], xi2: f64) -> NoiseFitModel {
    NoiseFitModel {
        s_psn: theta[0].exp(),
        s_atomic: theta[1].exp(),
        delta_f: theta[2].exp(),
        xi2,
    }
}

/// Covariance of (s_psn, s_atomic, delta_f) from the observed information in
/// log-parameter space, mapped to linear space.
fn covariance_at(
    bins: &[(f64, f64)],
    theta: &[f64; 3],
    xi2: f64,
    k_eff: f64,
) -> [[f64; 3]; 3] {
    let h = 1e-4;
    let ll = |t: &[f64; 3]| whittle_loglik(bins, &model_from_log(t, xi2), k_eff);
    let mut hess = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in a..3 {
            let mut tpp = *theta;
            let mut tpm = *theta;
            let mut tmp = *theta;
            let mut tmm = *theta;
            tpp[a] += h;
            tpp[b] += h;
            tpm[a] += h;
            tpm[b] -= h;
            tmp[a] -= h;
            tmp[b] += h;
            tmm[a] -= h;
            tmm[b] -= h;
            let v = (ll(&tpp) - ll(&tpm) - ll(&tmp) + ll(&tmm)) / (4.0 * h * h);
            hess[a][b] = v;
            hess[b][a] = v;
        }
    }
    let neg = {
        let mut n = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                n[i][j] = -hess[i][j];
            }
        }
        n
    };
    let p = [theta[0].exp(), theta[1].exp(), theta[2].exp()];
    if let Some(cov_log) = invert3(&neg) {
        if (0..3).all(|i| cov_log[i][i] > 0.0) {
            let mut cov = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    cov[i][j] = p[i] * p[j] * cov_log[i][j];
                }
            }
            return cov;
        }
    }
    // Fallback: per-parameter curvature only.
    let mut cov = [[0.0; 3]; 3];
    for (a, pa) in p.iter().enumerate() {
        if hess[a][a] < 0.0 {
            cov[a][a] = pa * pa / (-hess[a][a]);
        }
    }
    cov
}

fn degenerate_result(
    flat_level: f64,
    flat_ll: f64,
    init: &NoiseFitModel,
    xi2: f64,
    k_eff: f64,
    n_used: usize,
    n_iter: usize,
) -> FitResult {
    let s_psn = flat_level / xi2;
    let mut cov = [[0.0; 3]; 3];
    // Flat-model curvature: var(ln c) = 1 / (k_eff * n).
    cov[0][0] = s_psn * s_psn / (k_eff * n_used as f64);
    FitResult {
        model: NoiseFitModel { s_psn, s_atomic: 0.0, delta_f: init.delta_f, xi2 },
        loglik: flat_ll,
        n_used,
        k_eff,
        cov,
        degenerate: true,
        n_iter,
    }
}

/// Fits the floor-plus-Lorentzian model to the unmasked bins of a spectrum by
/// maximizing the Whittle likelihood, with the squeezing factor `xi2` held
/// fixed.
///
/// Requires at least 50 unmasked bins and at least 8 recorded segments. A
/// spectrum indistinguishable from flat (likelihood gain < 2 over the
/// flat-only model) returns the flat fit with the `degenerate` flag instead
/// of an unidentifiable linewidth.
pub fn fit_noise_spectrum(
    record: &SpectrumRecord,
    xi2: f64,
    init: &NoiseFitModel,
) -> Result<FitResult, FitError> {
    if !(xi2 > 0.0 && xi2.is_finite()) {
        return Err(FitError::Config(format!("xi2 must be positive, got {xi2}")));
    }
    if record.meta.n_segments < 8 {
        return Err(FitError::Config(format!(
            "fit requires >= 8 recorded segments, got {}",
            record.meta.n_segments
        )));
    }
    init.validate()?;
    let bins = unmasked_bins(record);
    if bins.len() < 50 {
        return Err(FitError::InsufficientData { n_unmasked: bins.len(), needed: 50 });
    }
    let k_eff = effective_segments(record.meta.n_segments, record.meta.overlap);
    let (flat_level, flat_ll) = flat_mle(&bins, k_eff);

    let theta0 = [
        init.s_psn.max(f64::MIN_POSITIVE).ln(),
        init.s_atomic.max(1e-12 * flat_level.max(f64::MIN_POSITIVE)).ln(),
        init.delta_f.ln(),
    ];
    let objective = |t: &[f64; 3]| -> f64 {
        if t.iter().any(|&x| !x.is_finite() || x.abs() > 60.0) {
            return f64::INFINITY;
        }
        -whittle_loglik(&bins, &model_from_log(t, xi2), k_eff)
    };
    let (theta, neg_ll, n_iter, converged) = nelder_mead(objective, theta0, 0.4);
    let ll = -neg_ll;
    let model = model_from_log(&theta, xi2);

    // Flat-spectrum degeneracy: the extra Lorentzian must be supported by the
    // data, otherwise delta_f is unidentifiable.
    let atomic_negligible = model.s_atomic < 1e-6 * model.floor();
    if ll - flat_ll < 2.0 || atomic_negligible {
        return Ok(degenerate_result(flat_level, flat_ll, init, xi2, k_eff, bins.len(), n_iter));
    }
    if !converged {
        return Err(FitError::NonConvergence { iters: n_iter });
    }
    let cov = covariance_at(&bins, &theta, xi2, k_eff);
    Ok(FitResult { model, loglik: ll, n_used: bins.len(), k_eff, cov, degenerate: false, n_iter })
}

/// Convenience wrapper: fit with the automatic initial guess.
pub fn fit_spectrum_auto(record: &SpectrumRecord, xi2: f64) -> Result<FitResult, FitError> {
    let init = suggest_init(record, xi2)?;
    fit_noise_spectrum(record, xi2, &init)
}

// ---------------------------------------------------------------------------
// Decomposition
// ---------------------------------------------------------------------------

/// Total power of one atomic component with propagated uncertainty.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ComponentEstimate {
    /// Integrated Lorentzian power, uV^2.
    pub total: f64,
    pub std_error: f64,
    /// Fitted half-width of the component, Hz.
    pub delta_f: f64,
}

/// Back-action total extracted by subtraction.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MbaEstimate {
    /// Detected back-action power (includes the conjugate-quadrature factor), uV^2.
    pub total: f64,
    pub std_error: f64,
    /// True when the subtraction yielded a negative value (reported, never
    /// clamped).
    pub negative: bool,
    pub delta_f_pol: f64,
    /// Back-action power with the conjugate-quadrature (pre-loss) scaling
    /// divided out.
    pub intrinsic: f64,
}

fn atomic_total_error(fit: &FitResult) -> f64 {
    let s = fit.model.s_atomic;
    let d = fit.model.delta_f;
    let c = PI / 2.0;
    let var = c * c
        * (d * d * fit.cov[1][1] + s * s * fit.cov[2][2] + 2.0 * s * d * fit.cov[1][2]);
    var.max(0.0).sqrt()
}

/// Spin-projection-noise total from an unpolarized-ensemble fit: the flat
/// floor is carried separately, so the whole Lorentzian is spin noise.
pub fn extract_spn(unpol_fit: &FitResult) -> ComponentEstimate {
    ComponentEstimate {
        total: total_power(unpol_fit.model.s_atomic, unpol_fit.model.delta_f),
        std_error: atomic_total_error(unpol_fit),
        delta_f: unpol_fit.model.delta_f,
    }
}

/// Back-action total from a polarized-ensemble fit: polarized atomic power
/// minus the spin-projection total from the matching unpolarized run.
///
/// Totals are subtracted directly (they are linewidth-independent even when
/// the polarized and unpolarized widths differ slightly); both widths remain
/// available on the estimates.
pub fn extract_mba(
    pol_fit: &FitResult,
    spn: &ComponentEstimate,
    xibar2: f64,
) -> Result<MbaEstimate, FitError> {
    if !(xibar2 > 0.0 && xibar2.is_finite()) {
        return Err(FitError::Config(format!("xibar2 must be positive, got {xibar2}")));
    }
    let pol_total = total_power(pol_fit.model.s_atomic, pol_fit.model.delta_f);
    let pol_err = atomic_total_error(pol_fit);
    let total = pol_total - spn.total;
    let std_error = (pol_err * pol_err + spn.std_error * spn.std_error).sqrt();
    Ok(MbaEstimate {
        total,
        std_error,
        negative: total < 0.0,
        delta_f_pol: pol_fit.model.delta_f,
        intrinsic: total / xibar2,
    })
}

/// 68% interval as (16th, 50th, 84th) percentiles.
pub type Percentiles = [f64; 3];

/// Full noise budget for one (probe power, pump power, probe kind, channel)
/// cell.
#[derive(Debug, Clone, Serialize)]
pub struct NoiseDecomposition {
    /// Detected flat floor xi2 * s_psn, uV^2/Hz.
    pub psn_floor: f64,
    /// De-squeezed flat level, uV^2/Hz.
    pub s_psn: f64,
    pub spn_tot: f64,
    pub mba_tot: f64,
    pub mba_negative: bool,
    pub delta_f_unpol: f64,
    pub delta_f_pol: f64,
    /// Bootstrap 68% intervals: [16th, 50th, 84th] percentiles.
    pub ci68: DecompositionCi,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecompositionCi {
    pub psn_floor: Percentiles,
    pub spn_tot: Percentiles,
    pub mba_tot: Percentiles,
    pub delta_f_unpol: Percentiles,
    pub delta_f_pol: Percentiles,
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

/// Resampling scheme for [`bootstrap_fit`].
pub enum BootstrapMode<'a> {
    /// Draw synthetic bins from the fitted Gamma model (default: persisted
    /// spectra carry no segments).
    Parametric,
    /// Resample retained per-segment periodograms with replacement.
    Segments(&'a [Vec<f64>]),
}

/// One converged bootstrap replica.
#[derive(Debug, Clone, Copy)]
pub struct ReplicaParams {
    pub s_psn: f64,
    pub s_atomic: f64,
    pub delta_f: f64,
    pub atomic_total: f64,
}

/// Bootstrap distribution of the fit parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub n_boot: usize,
    pub n_diverged: usize,
    pub s_psn: Percentiles,
    pub s_atomic: Percentiles,
    pub delta_f: Percentiles,
    pub atomic_total: Percentiles,
    /// Converged replicas, retained for paired subtraction of decompositions.
    #[serde(skip)]
    pub replicas: Vec<ReplicaParams>,
}

/// Linear-interpolation percentile (q in [0, 100]) of unsorted data.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = (q / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    }
}

fn percentiles_of(values: &[f64]) -> Percentiles {
    [percentile(values, 16.0), percentile(values, 50.0), percentile(values, 84.0)]
}

/// Refits resampled spectra and returns 16/50/84 percentiles per parameter.
///
/// Replicas that fail to converge are counted; more than 20% divergence is an
/// error. Intervals are meaningful for `n_boot >= 100`; smaller values
/// (including 1) are allowed for smoke checks and yield degenerate intervals.
pub fn bootstrap_fit(
    record: &SpectrumRecord,
    xi2: f64,
    n_boot: usize,
    mode: BootstrapMode<'_>,
    seed: u64,
) -> Result<BootstrapResult, FitError> {
    if n_boot == 0 {
        return Err(FitError::Config("n_boot must be >= 1".into()));
    }
    let base_fit = fit_spectrum_auto(record, xi2)?;
    let init = base_fit.model;
    let k_eff = base_fit.k_eff;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut replicas: Vec<ReplicaParams> = Vec::with_capacity(n_boot);
    let mut diverged = 0usize;

    if let BootstrapMode::Segments(segments) = &mode {
        if segments.is_empty() {
            return Err(FitError::Config("segment bootstrap requires retained segments".into()));
        }
        let n_bins = record.freqs.len();
        if segments.iter().any(|s| s.len() != n_bins) {
            return Err(FitError::Config(
                "retained segments must match the spectrum's bin count".into(),
            ));
        }
    }

    for _ in 0..n_boot {
        let resampled = match &mode {
            BootstrapMode::Parametric => {
                let mut psd = Vec::with_capacity(record.freqs.len());
                for (&f, &m) in record.freqs.iter().zip(&record.mask) {
                    if m {
                        psd.push(0.0); // masked bins never enter the fit
                        continue;
                    }
                    let mu = init.evaluate(f);
                    let gamma = Gamma::new(k_eff, mu / k_eff)
                        .map_err(|e| FitError::Config(format!("gamma sampler: {e}")))?;
                    psd.push(rng.sample(gamma));
                }
                SpectrumRecord {
                    freqs: record.freqs.clone(),
                    psd,
                    mask: record.mask.clone(),
                    meta: record.meta.clone(),
                }
            }
            BootstrapMode::Segments(segments) => {
                let k = segments.len();
                let mut psd = vec![0.0; record.freqs.len()];
                for _ in 0..k {
                    let idx = rng.gen_range(0..k);
                    for (p, s) in psd.iter_mut().zip(&segments[idx]) {
                        *p += s / k as f64;
                    }
                }
                SpectrumRecord {
                    freqs: record.freqs.clone(),
                    psd,
                    mask: record.mask.clone(),
                    meta: record.meta.clone(),
                }
            }
        };
        match fit_noise_spectrum(&resampled, xi2, &init) {
            Ok(fit) => replicas.push(ReplicaParams {
                s_psn: fit.model.s_psn,
                s_atomic: fit.model.s_atomic,
                delta_f: fit.model.delta_f,
                atomic_total: total_power(fit.model.s_atomic, fit.model.delta_f),
            }),
            Err(_) => diverged += 1,
        }
    }
    if diverged * 5 > n_boot {
        return Err(FitError::BootstrapUnstable { diverged, total: n_boot });
    }
    let col = |f: fn(&ReplicaParams) -> f64| -> Vec<f64> { replicas.iter().map(f).collect() };
    Ok(BootstrapResult {
        n_boot,
        n_diverged: diverged,
        s_psn: percentiles_of(&col(|r| r.s_psn)),
        s_atomic: percentiles_of(&col(|r| r.s_atomic)),
        delta_f: percentiles_of(&col(|r| r.delta_f)),
        atomic_total: percentiles_of(&col(|r| r.atomic_total)),
        replicas,
    })
}

/// Draws a synthetic averaged spectrum from the model: each bin is Gamma with
/// shape `k_eff` and mean equal to the model PSD. The metadata records an
/// equivalent non-overlapping segment count so refits assume the same shape.
pub fn generate_model_spectrum(
    model: &NoiseFitModel,
    freqs: &[f64],
    k_eff: f64,
    seed: u64,
) -> Result<SpectrumRecord, FitError> {
    model.validate()?;
    if !(k_eff >= 1.0) {
        return Err(FitError::Config(format!("k_eff must be >= 1, got {k_eff}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut psd = Vec::with_capacity(freqs.len());
    for &f in freqs {
        let mu = model.evaluate(f);
        let gamma = Gamma::new(k_eff, mu / k_eff)
            .map_err(|e| FitError::Config(format!("gamma sampler: {e}")))?;
        psd.push(rng.sample(gamma));
    }
    let meta = SpectrumMeta {
        xi2: model.xi2,
        n_segments: k_eff.round() as usize,
        overlap: 0.0,
        ..SpectrumMeta::default()
    };
    Ok(SpectrumRecord { freqs: freqs.to_vec(), psd, mask: vec![false; freqs.len()], meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(df: f64, f_max: f64) -> Vec<f64> {
        let n = (f_max / df) as usize + 1;
        (0..n).map(|k| k as f64 * df).collect()
    }

    #[test]
    fn lorentzian_peak_and_width() {
        assert_eq!(lorentzian(0.0, 80.0), 1.0);
        assert!((lorentzian(80.0, 80.0) - 0.5).abs() < 1e-15);
        assert!((lorentzian(300.0, 100.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn total_power_closed_form() {
        assert!((total_power(4.0, 100.0) - 628.3185307179587).abs() < 1e-9);
        assert_eq!(total_power(0.0, 50.0), 0.0);
        // Exactly linear in each argument.
        assert_eq!(total_power(8.0, 100.0), 2.0 * total_power(4.0, 100.0));
        assert_eq!(total_power(4.0, 200.0), 2.0 * total_power(4.0, 100.0));
    }

    #[test]
    fn total_power_matches_numerical_quadrature() {
        // Composite Simpson over [0, 1e6] Hz; the analytic tail beyond is
        // ~6e-5 relative, inside the 0.1% budget.
        let (s, d) = (4.0, 100.0);
        let f_hi = 1e6;
        let n = 1 << 21;
        let h = f_hi / n as f64;
        let g = |f: f64| s * lorentzian(f, d);
        let mut sum = g(0.0) + g(f_hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            sum += w * g(i as f64 * h);
        }
        let integral = sum * h / 3.0;
        let closed = total_power(s, d);
        assert!(
            (integral - closed).abs() / closed < 1e-3,
            "quadrature {integral} vs closed form {closed}"
        );
    }

    #[test]
    fn fit_recovers_synthetic_truth_within_5_percent() {
        let truth = NoiseFitModel { s_psn: 4.0, s_atomic: 10.0, delta_f: 80.0, xi2: 1.0 };
        let freqs = grid(5.0, 2500.0);
        let rec = generate_model_spectrum(&truth, &freqs, 200.0, 71).unwrap();
        let fit = fit_spectrum_auto(&rec, 1.0).unwrap();
        assert!(!fit.degenerate);
        assert!((fit.model.s_psn - 4.0).abs() / 4.0 < 0.05, "s_psn {}", fit.model.s_psn);
        assert!(
            (fit.model.s_atomic - 10.0).abs() / 10.0 < 0.05,
            "s_atomic {}",
            fit.model.s_atomic
        );
        assert!((fit.model.delta_f - 80.0).abs() / 80.0 < 0.05, "delta_f {}", fit.model.delta_f);
    }

    #[test]
    fn fit_is_fixed_point_on_noiseless_model_spectrum() {
        let truth = NoiseFitModel { s_psn: 6.0, s_atomic: 18.0, delta_f: 120.0, xi2: 1.0 };
        let freqs = grid(4.0, 2000.0);
        let psd: Vec<f64> = freqs.iter().map(|&f| truth.evaluate(f)).collect();
        let meta = SpectrumMeta { n_segments: 100, overlap: 0.0, ..SpectrumMeta::default() };
        let rec =
            SpectrumRecord { mask: vec![false; freqs.len()], freqs, psd, meta };
        let fit = fit_spectrum_auto(&rec, 1.0).unwrap();
        for (got, want) in [
            (fit.model.s_psn, 6.0),
            (fit.model.s_atomic, 18.0),
            (fit.model.delta_f, 120.0),
        ] {
            assert!((got - want).abs() / want < 1e-3, "{got} vs {want}");
        }
    }

    #[test]
    fn flat_spectrum_is_flagged_degenerate() {
        let truth = NoiseFitModel { s_psn: 7.0, s_atomic: 0.0, delta_f: 100.0, xi2: 1.0 };
        let freqs = grid(5.0, 2500.0);
        // validate() forbids s_atomic < 0 but 0 is legal.
        let rec = generate_model_spectrum(&truth, &freqs, 200.0, 5).unwrap();
        let fit = fit_spectrum_auto(&rec, 1.0).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.model.s_atomic, 0.0);
        assert!((fit.model.s_psn - 7.0).abs() / 7.0 < 0.02, "flat level {}", fit.model.s_psn);
        // Degenerate decomposition: no atomic power.
        let spn = extract_spn(&fit);
        assert_eq!(spn.total, 0.0);
    }

    #[test]
    fn floor_recovery_on_probe_dominated_shape() {
        // Shape representative of a high-probe-power cell: large flat floor,
        // broad shallow peak.
        let truth = NoiseFitModel { s_psn: 55.11, s_atomic: 33.4, delta_f: 318.0, xi2: 1.0 };
        let freqs = grid(10.25, 2100.0);
        let rec = generate_model_spectrum(&truth, &freqs, 200.0, 99).unwrap();
        let fit = fit_spectrum_auto(&rec, 1.0).unwrap();
        assert!(
            (fit.model.s_psn - 55.11).abs() / 55.11 < 0.02,
            "floor {} vs 55.11",
            fit.model.s_psn
        );
    }

    #[test]
    fn squeezing_factor_scales_only_the_floor() {
        let truth = NoiseFitModel { s_psn: 20.0, s_atomic: 30.0, delta_f: 150.0, xi2: 1.0 };
        let freqs = grid(5.0, 2500.0);
        let rec = generate_model_spectrum(&truth, &freqs, 300.0, 13).unwrap();
        let fit_unit = fit_spectrum_auto(&rec, 1.0).unwrap();
        let fit_sq = fit_spectrum_auto(&rec, 0.766).unwrap();
        // The detected floor xi2 * s_psn is what the data constrain.
        let floor_unit = fit_unit.model.floor();
        let floor_sq = fit_sq.model.floor();
        assert!(
            (floor_unit - floor_sq).abs() / floor_unit < 1e-3,
            "floors {floor_unit} vs {floor_sq}"
        );
        assert!(
            (fit_unit.model.s_atomic - fit_sq.model.s_atomic).abs() / fit_unit.model.s_atomic
                < 1e-3
        );
        assert!(
            (fit_unit.model.delta_f - fit_sq.model.delta_f).abs() / fit_unit.model.delta_f < 1e-3
        );
    }

    #[test]
    fn fit_requires_enough_unmasked_bins() {
        let truth = NoiseFitModel { s_psn: 4.0, s_atomic: 10.0, delta_f: 80.0, xi2: 1.0 };
        let freqs = grid(5.0, 2500.0);
        let mut rec = generate_model_spectrum(&truth, &freqs, 200.0, 1).unwrap();
        for (i, m) in rec.mask.iter_mut().enumerate() {
            *m = i >= 40; // leave only 40 bins
        }
        match fit_spectrum_auto(&rec, 1.0) {
            Err(FitError::InsufficientData { n_unmasked: 40, needed: 50 }) => {}
            other => panic!("expected InsufficientData, got {other:?}"),
        }
    }

    #[test]
    fn mba_subtraction_and_negative_flag() {
        let spn = ComponentEstimate { total: 500.0, std_error: 20.0, delta_f: 180.0 };
        // Polarized fit with smaller atomic power than the unpolarized one.
        let pol = FitResult {
            model: NoiseFitModel { s_psn: 20.0, s_atomic: 1.5, delta_f: 190.0, xi2: 1.0 },
            loglik: 0.0,
            n_used: 100,
            k_eff: 100.0,
            cov: [[0.0; 3]; 3],
            degenerate: false,
            n_iter: 0,
        };
        let pol_total = total_power(1.5, 190.0); // 447.7
        let mba = extract_mba(&pol, &spn, 1.85).unwrap();
        assert!((mba.total - (pol_total - 500.0)).abs() < 1e-9);
        assert!(mba.negative);
        assert!((mba.intrinsic - mba.total / 1.85).abs() < 1e-12);
        // Equal atomic parts give exactly zero.
        let spn_eq = ComponentEstimate { total: pol_total, std_error: 0.0, delta_f: 190.0 };
        let mba0 = extract_mba(&pol, &spn_eq, 1.0).unwrap();
        assert_eq!(mba0.total, 0.0);
        assert!(!mba0.negative);
    }

    #[test]
    fn bootstrap_interval_shrinks_with_segment_count() {
        let truth = NoiseFitModel { s_psn: 4.0, s_atomic: 10.0, delta_f: 80.0, xi2: 1.0 };
        let freqs = grid(5.0, 2500.0);
        let width = |k: f64, seed: u64| -> f64 {
            let rec = generate_model_spectrum(&truth, &freqs, k, seed).unwrap();
            let bs = bootstrap_fit(&rec, 1.0, 60, BootstrapMode::Parametric, seed).unwrap();
            bs.s_atomic[2] - bs.s_atomic[0]
        };
        // Average a few seeds to stabilize the ratio.
        let w_lo: f64 = (0..3).map(|s| width(100.0, 100 + s)).sum::<f64>() / 3.0;
        let w_hi: f64 = (0..3).map(|s| width(400.0, 200 + s)).sum::<f64>() / 3.0;
        let ratio = w_lo / w_hi;
        assert!(
            (ratio - 2.0).abs() < 0.7,
            "CI width ratio for 4x segments should be ~2, got {ratio}"
        );
    }

    #[test]
    fn bootstrap_single_replica_degenerates() {
        let truth = NoiseFitModel { s_psn: 4.0, s_atomic: 10.0, delta_f: 80.0, xi2: 1.0 };
        let freqs = grid(5.0, 2500.0);
        let rec = generate_model_spectrum(&truth, &freqs, 200.0, 8).unwrap();
        let bs = bootstrap_fit(&rec, 1.0, 1, BootstrapMode::Parametric, 9).unwrap();
        assert_eq!(bs.s_psn[0], bs.s_psn[2]);
        assert_eq!(bs.replicas.len() + bs.n_diverged, 1);
    }

    #[test]
    fn segment_bootstrap_runs_on_retained_periodograms() {
        let truth = NoiseFitModel { s_psn: 5.0, s_atomic: 25.0, delta_f: 100.0, xi2: 1.0 };
        let freqs = grid(5.0, 2500.0);
        // Fabricate K single-segment periodograms (Gamma shape 1 per bin).
        let k = 150usize;
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut segments = Vec::with_capacity(k);
        for _ in 0..k {
            let seg: Vec<f64> = freqs
                .iter()
                .map(|&f| {
                    let gamma = Gamma::new(1.0, truth.evaluate(f)).unwrap();
                    rng.sample(gamma)
                })
                .collect();
            segments.push(seg);
        }
        let mut psd = vec![0.0; freqs.len()];
        for seg in &segments {
            for (p, s) in psd.iter_mut().zip(seg) {
                *p += s / k as f64;
            }
        }
        let meta = SpectrumMeta { n_segments: k, overlap: 0.0, ..SpectrumMeta::default() };
        let rec =
            SpectrumRecord { mask: vec![false; freqs.len()], freqs, psd, meta };
        let bs = bootstrap_fit(&rec, 1.0, 40, BootstrapMode::Segments(&segments), 45).unwrap();
        assert!(bs.n_diverged * 5 <= 40);
        assert!(bs.s_psn[0] < bs.s_psn[1] && bs.s_psn[1] < bs.s_psn[2]);
        assert!((bs.delta_f[1] - 100.0).abs() / 100.0 < 0.15, "median width {}", bs.delta_f[1]);
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 5.0);
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert_eq!(percentile(&v, 25.0), 2.0);
    }

    #[test]
    fn decomposition_matches_reconstruction() {
        // Fit, then rebuild the model spectrum: unmasked bins must scatter
        // around it consistent with the Gamma shape (reduced chi^2 near 1).
        let truth = NoiseFitModel { s_psn: 10.0, s_atomic: 40.0, delta_f: 150.0, xi2: 1.0 };
        let freqs = grid(5.0, 2500.0);
        let k = 250.0;
        let rec = generate_model_spectrum(&truth, &freqs, k, 21).unwrap();
        let fit = fit_spectrum_auto(&rec, 1.0).unwrap();
        let mut chi2 = 0.0;
        let mut n = 0usize;
        for (&f, &p) in rec.freqs.iter().zip(&rec.psd) {
            let mu = fit.model.evaluate(f);
            // Var of a Gamma(k, mu/k) bin is mu^2/k.
            chi2 += (p - mu) * (p - mu) / (mu * mu / k);
            n += 1;
        }
        let chi2_red = chi2 / (n as f64 - 3.0);
        assert!(
            (0.8..1.3).contains(&chi2_red),
            "reduced chi^2 {chi2_red} outside [0.8, 1.3]"
        );
    }
}
