//! Signal processing from raw polarimeter voltage to masked noise spectra.
//!
//! The chain mirrors a hardware lock-in plus spectrum analyzer:
//!
//! 1. [`lockin_demodulate`] mixes the voltage with `2*cos` / `-2*sin` of the
//!    pump reference (so a unit tone at the reference demodulates to unit dc),
//!    then low-passes and decimates in two stages (boxcar pre-decimation plus
//!    a linear-phase Kaiser-windowed FIR).
//! 2. [`welch_psd`] averages windowed-segment periodograms into a single-sided
//!    power spectral density.
//! 3. [`mask_technical_peaks`] flags frequency bands (mains hum, calibration
//!    tones) so that later fits skip them; masking never alters PSD values.
//!
//! Spectra serialize to a CSV table plus a JSON metadata sidecar with
//! bit-exact round-trip of all floating-point payloads.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::io::BufRead;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid dsp setup: {0}")]
    Config(String),
    #[error(
        "low-pass cutoff {lp_cutoff} Hz does not clear the decimated Nyquist \
         rate {f_nyq_out} Hz; reduce the cutoff or the decimation factor"
    )]
    AliasError { lp_cutoff: f64, f_nyq_out: f64 },
    #[error("segmenting failed: {0}")]
    SegmentError(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed spectrum file: {0}")]
    Parse(String),
    #[error("metadata (de)serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Uniformly sampled real-valued series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    /// Absolute time of the first sample, s.
    pub t0: f64,
    /// Sampling rate, Hz.
    pub f_s: f64,
    pub values: Vec<f64>,
}

/// In-phase (dc) and quadrature (rf) channels after demodulation.
#[derive(Debug, Clone, PartialEq)]
pub struct DemodChannels {
    /// Absolute time of the first output sample (includes filter group delay), s.
    pub t0: f64,
    /// Output sampling rate, Hz.
    pub f_s_out: f64,
    /// In-phase channel: the dc-magnetometer quadrature.
    pub dc: Vec<f64>,
    /// Quadrature channel: the rf-magnetometer quadrature.
    pub rf: Vec<f64>,
}

/// Which demodulated channel a spectrum belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Dc,
    Rf,
}

impl Channel {
    pub fn label(self) -> &'static str {
        match self {
            Channel::Dc => "dc",
            Channel::Rf => "rf",
        }
    }
}

/// Segment window applied before each periodogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 * (1.0 - (TAU * i as f64 / n as f64).cos()))
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

/// Provenance and acquisition metadata carried next to a spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMeta {
    /// "dc", "rf", or "raw" for an undemodulated spectrum.
    pub channel: String,
    /// Probe polarization class label ("coherent", ...); "none" if not set.
    pub probe_kind: String,
    pub p_pr_mw: f64,
    pub p_pu_uw: f64,
    pub polarized: bool,
    /// Detected-quadrature squeezing factor used when this spectrum is fit.
    pub xi2: f64,
    /// Conjugate-quadrature factor (back-action side).
    pub xibar2: f64,
    /// Number of averaged (possibly overlapping) segments.
    pub n_segments: usize,
    /// Fractional segment overlap in [0, 1).
    pub overlap: f64,
    pub seed: u64,
}

impl Default for SpectrumMeta {
    fn default() -> Self {
        SpectrumMeta {
            channel: "raw".into(),
            probe_kind: "none".into(),
            p_pr_mw: 0.0,
            p_pu_uw: 0.0,
            polarized: false,
            xi2: 1.0,
            xibar2: 1.0,
            n_segments: 0,
            overlap: 0.0,
            seed: 0,
        }
    }
}

/// Single-sided averaged power spectral density with a fit mask.
///
/// `mask[i] = true` means bin `i` is excluded from fitting; PSD values are
/// never modified by masking.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumRecord {
    pub freqs: Vec<f64>,
    pub psd: Vec<f64>,
    pub mask: Vec<bool>,
    pub meta: SpectrumMeta,
}

impl SpectrumRecord {
    /// Frequency resolution of the grid, Hz.
    pub fn df(&self) -> f64 {
        if self.freqs.len() >= 2 {
            self.freqs[1] - self.freqs[0]
        } else {
            0.0
        }
    }

    pub fn n_unmasked(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }
}

/// Equivalent number of independent periodogram averages.
///
/// Hann segments at 50% overlap are correlated; averaging `K` of them is
/// statistically worth about `1.89x` the count of non-overlapping segments
/// covering the same record, capped at `K` itself. For zero overlap this
/// reduces to `K`.
pub fn effective_segments(n_segments: usize, overlap: f64) -> f64 {
    let k = n_segments as f64;
    if n_segments == 0 {
        return 0.0;
    }
    let non_overlapping = (k - 1.0) * (1.0 - overlap) + 1.0;
    (1.89 * non_overlapping).min(k)
}

// ---------------------------------------------------------------------------
// FIR design
// ---------------------------------------------------------------------------

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_x2 = (x / 2.0) * (x / 2.0);
    for k in 1..64 {
        term *= half_x2 / ((k * k) as f64);
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    sum
}

/// Designs a linear-phase Kaiser-windowed-sinc low-pass FIR.
///
/// Passband edge `f_pass`, stopband edge `f_stop` (both Hz, relative to the
/// sampling rate `f_s`), stopband attenuation `atten_db`. Taps are normalized
/// to exactly unit dc gain.
pub fn design_kaiser_lowpass(
    f_s: f64,
    f_pass: f64,
    f_stop: f64,
    atten_db: f64,
) -> Result<Vec<f64>, DspError> {
    if !(f_s > 0.0 && f_pass > 0.0 && f_stop > f_pass && f_stop < f_s / 2.0) {
        return Err(DspError::Config(format!(
            "FIR band edges must satisfy 0 < pass < stop < f_s/2, got pass = {f_pass}, \
             stop = {f_stop}, f_s = {f_s}"
        )));
    }
    let delta_omega = TAU * (f_stop - f_pass) / f_s;
    let beta = if atten_db > 50.0 {
        0.1102 * (atten_db - 8.7)
    } else if atten_db >= 21.0 {
        0.5842 * (atten_db - 21.0).powf(0.4) + 0.07886 * (atten_db - 21.0)
    } else {
        0.0
    };
    let mut n = ((atten_db - 7.95) / (2.285 * delta_omega)).ceil() as usize + 1;
    if n % 2 == 0 {
        n += 1; // odd length keeps the delay an integer number of samples
    }
    if n > 200_000 {
        return Err(DspError::Config(format!(
            "FIR length {n} is unreasonable; widen the transition band"
        )));
    }
    let f_c = 0.5 * (f_pass + f_stop) / f_s; // cycles per sample
    let m = (n - 1) as f64 / 2.0;
    let i0_beta = bessel_i0(beta);
    let mut taps: Vec<f64> = (0..n)
        .map(|i| {
            let x = i as f64 - m;
            let sinc = if x == 0.0 {
                2.0 * f_c
            } else {
                (TAU * f_c * x).sin() / (PI * x)
            };
            let r = x / m;
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            sinc * w
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    Ok(taps)
}

// ---------------------------------------------------------------------------
// Lock-in demodulation
// ---------------------------------------------------------------------------

/// Splits a decimation factor into a boxcar stage and an FIR stage.
///
/// Large factors run the expensive FIR at a 16x-reduced intermediate rate; a
/// boxcar average is exactly PSD-preserving for white noise and has
/// negligible droop over the final passband.
fn split_decimation(decim: usize) -> (usize, usize) {
    if decim >= 32 && decim % 16 == 0 {
        (decim / 16, 16)
    } else {
        (1, decim)
    }
}

/// Streaming lock-in: mix, boxcar-decimate, FIR low-pass, decimate.
///
/// Feed raw samples one at a time; demodulated output pairs accumulate
/// internally and are retrieved with [`LockinStream::finish`].
pub struct LockinStream {
    phase: f64,
    dphase: f64,
    d1: usize,
    d2: usize,
    acc_i: f64,
    acc_q: f64,
    acc_n: usize,
    taps: Vec<f64>,
    ring_i: Vec<f64>,
    ring_q: Vec<f64>,
    ring_pos: usize,
    mid_count: usize,
    out_stride_count: usize,
    dc: Vec<f64>,
    rf: Vec<f64>,
    t0_out: f64,
    f_s_out: f64,
}

impl LockinStream {
    pub fn new(
        t0: f64,
        f_s: f64,
        f_ref: f64,
        phase_ref: f64,
        lp_cutoff: f64,
        decim: usize,
    ) -> Result<Self, DspError> {
        if !(f_s > 0.0 && f_s.is_finite()) {
            return Err(DspError::Config(format!("sample rate must be positive, got {f_s}")));
        }
        if !(f_ref > 0.0 && f_ref < f_s / 2.0) {
            return Err(DspError::Config(format!(
                "reference frequency must lie in (0, f_s/2) = (0, {}), got {f_ref}",
                f_s / 2.0
            )));
        }
        if decim == 0 {
            return Err(DspError::Config("decimation factor must be >= 1".into()));
        }
        let f_s_out = f_s / decim as f64;
        if !(lp_cutoff > 0.0 && lp_cutoff < 0.5 * f_s_out) {
            return Err(DspError::AliasError { lp_cutoff, f_nyq_out: 0.5 * f_s_out });
        }
        let (d1, d2) = split_decimation(decim);
        let f_mid = f_s / d1 as f64;
        // Stopband must start where the first decimation image of the
        // protected band [0, lp_cutoff] would fold back in.
        let f_stop = (f_s_out - lp_cutoff).min(0.49 * f_mid);
        let taps = design_kaiser_lowpass(f_mid, lp_cutoff, f_stop, 90.0)?;
        let n_taps = taps.len();
        // First valid FIR output is centered (n_taps - 1)/2 mid-samples plus
        // half a boxcar after t0.
        let group_delay =
            ((n_taps - 1) as f64 / 2.0) / f_mid + 0.5 * (d1 as f64 - 1.0) / f_s;
        Ok(LockinStream {
            phase: (TAU * f_ref * t0 + phase_ref).rem_euclid(TAU),
            dphase: TAU * f_ref / f_s,
            d1,
            d2,
            acc_i: 0.0,
            acc_q: 0.0,
            acc_n: 0,
            ring_i: vec![0.0; n_taps],
            ring_q: vec![0.0; n_taps],
            ring_pos: 0,
            mid_count: 0,
            out_stride_count: 0,
            taps,
            dc: Vec::new(),
            rf: Vec::new(),
            t0_out: t0 + (n_taps - 1) as f64 / f_mid + group_delay,
            f_s_out,
        })
    }

    /// Mixes in one raw sample; pushes any completed output samples.
    #[inline]
    pub fn feed(&mut self, v: f64) {
        let (sin, cos) = self.phase.sin_cos();
        self.phase += self.dphase;
        if self.phase >= TAU {
            self.phase -= TAU;
        }
        // Complex demodulation 2 e^{-i theta} v: a tone at the reference with
        // phase phi lands at dc = A cos(phi), rf = A sin(phi).
        self.acc_i += 2.0 * cos * v;
        self.acc_q += -2.0 * sin * v;
        self.acc_n += 1;
        if self.acc_n == self.d1 {
            let scale = 1.0 / self.d1 as f64;
            let yi = self.acc_i * scale;
            let yq = self.acc_q * scale;
            self.acc_i = 0.0;
            self.acc_q = 0.0;
            self.acc_n = 0;
            self.push_mid(yi, yq);
        }
    }

    #[inline]
    fn push_mid(&mut self, yi: f64, yq: f64) {
        let n = self.taps.len();
        self.ring_i[self.ring_pos] = yi;
        self.ring_q[self.ring_pos] = yq;
        self.ring_pos = (self.ring_pos + 1) % n;
        self.mid_count += 1;
        if self.mid_count < n {
            return;
        }
        self.out_stride_count += 1;
        if self.out_stride_count == self.d2 {
            self.out_stride_count = 0;
            // ring_pos currently points at the oldest sample.
            let mut acc_i = 0.0;
            let mut acc_q = 0.0;
            let mut idx = if self.ring_pos == 0 { n - 1 } else { self.ring_pos - 1 };
            for &tap in &self.taps {
                acc_i += tap * self.ring_i[idx];
                acc_q += tap * self.ring_q[idx];
                idx = if idx == 0 { n - 1 } else { idx - 1 };
            }
            self.dc.push(acc_i);
            self.rf.push(acc_q);
        }
    }

    pub fn finish(self) -> DemodChannels {
        DemodChannels { t0: self.t0_out, f_s_out: self.f_s_out, dc: self.dc, rf: self.rf }
    }
}

/// Demodulates a voltage series at the pump reference into dc (in-phase) and
/// rf (quadrature) channels, low-passed at `lp_cutoff` and decimated by
/// `decim`.
pub fn lockin_demodulate(
    series: &TimeSeries,
    f_ref: f64,
    phase_ref: f64,
    lp_cutoff: f64,
    decim: usize,
) -> Result<DemodChannels, DspError> {
    let mut stream = LockinStream::new(series.t0, series.f_s, f_ref, phase_ref, lp_cutoff, decim)?;
    for &v in &series.values {
        stream.feed(v);
    }
    Ok(stream.finish())
}

// ---------------------------------------------------------------------------
// Welch PSD
// ---------------------------------------------------------------------------

/// Averaged single-sided Welch periodogram.
///
/// Normalization: for white noise of variance `sigma^2` the flat level is
/// `2 sigma^2 / f_s`, and the PSD integrates (sum times bin width) to the
/// series variance. The dc and Nyquist bins carry no single-sided doubling.
pub fn welch_psd(
    values: &[f64],
    f_s: f64,
    segment_len: usize,
    overlap: f64,
    window: Window,
) -> Result<SpectrumRecord, DspError> {
    if !(f_s > 0.0 && f_s.is_finite()) {
        return Err(DspError::Config(format!("sample rate must be positive, got {f_s}")));
    }
    if segment_len < 8 || segment_len % 2 != 0 {
        return Err(DspError::Config(format!(
            "segment_len must be an even number >= 8, got {segment_len}"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(DspError::Config(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    if values.len() < segment_len {
        return Err(DspError::SegmentError(format!(
            "series of {} samples is shorter than one segment of {}",
            values.len(),
            segment_len
        )));
    }
    let hop = ((segment_len as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let w = window.coefficients(segment_len);
    let window_power: f64 = w.iter().map(|x| x * x).sum();
    let n_bins = segment_len / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(segment_len);
    let mut buf: Vec<Complex<f64>> = vec![Complex::default(); segment_len];
    let mut acc = vec![0.0_f64; n_bins];
    let mut n_segments = 0usize;
    let mut start = 0usize;
    while start + segment_len <= values.len() {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(values[start + i] * w[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, a) in acc.iter_mut().enumerate() {
            *a += buf[k].norm_sqr();
        }
        n_segments += 1;
        start += hop;
    }
    let base = 1.0 / (f_s * window_power * n_segments as f64);
    let psd: Vec<f64> = acc
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            let one_sided = if k == 0 || k == n_bins - 1 { 1.0 } else { 2.0 };
            a * base * one_sided
        })
        .collect();
    let df = f_s / segment_len as f64;
    let freqs: Vec<f64> = (0..n_bins).map(|k| k as f64 * df).collect();
    let meta = SpectrumMeta { n_segments, overlap, ..SpectrumMeta::default() };
    Ok(SpectrumRecord { mask: vec![false; n_bins], freqs, psd, meta })
}

/// Flags every bin whose frequency falls inside any of `bands` (inclusive).
///
/// Bands are normalized so the lower edge comes first; bands outside the grid
/// simply mask nothing, and an empty list is the identity. Masking is pure
/// metadata: PSD values are untouched and re-masking is idempotent.
pub fn mask_technical_peaks(record: &mut SpectrumRecord, bands: &[(f64, f64)]) {
    for &(a, b) in bands {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        for (i, &f) in record.freqs.iter().enumerate() {
            if f >= lo && f <= hi {
                record.mask[i] = true;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// Writes `record` as `<base>.csv` (freq, psd, masked flag) plus
/// `<base>.meta.json`.
///
/// Floats are printed with Rust's shortest-round-trip formatting, so reading
/// the files back reproduces every value bit-exactly.
pub fn write_spectrum(record: &SpectrumRecord, base: &Path) -> Result<(), DspError> {
    let csv_path = base.with_extension("csv");
    std::fs::write(&csv_path, spectrum_csv(record))?;
    let meta_path = base.with_extension("meta.json");
    std::fs::write(meta_path, spectrum_meta_json(record)?)?;
    Ok(())
}

/// CSV rendering of the bins (shortest-round-trip floats, so the text is
/// bit-faithful); shared by [`write_spectrum`] and the result store.
pub fn spectrum_csv(record: &SpectrumRecord) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("freq_hz,psd_uv2_per_hz,masked\n");
    for i in 0..record.freqs.len() {
        let _ = writeln!(
            out,
            "{},{},{}",
            record.freqs[i],
            record.psd[i],
            if record.mask[i] { 1 } else { 0 }
        );
    }
    out
}

/// JSON rendering of the metadata sidecar.
pub fn spectrum_meta_json(record: &SpectrumRecord) -> Result<String, DspError> {
    Ok(serde_json::to_string_pretty(&record.meta)? + "\n")
}

/// Reads a spectrum written by [`write_spectrum`].
pub fn read_spectrum(base: &Path) -> Result<SpectrumRecord, DspError> {
    let csv_path = base.with_extension("csv");
    let file = std::fs::File::open(&csv_path)?;
    let reader = std::io::BufReader::new(file);
    let mut freqs = Vec::new();
    let mut psd = Vec::new();
    let mut mask = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            if line != "freq_hz,psd_uv2_per_hz,masked" {
                return Err(DspError::Parse(format!("unexpected header: {line}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let mut next = |name: &str| {
            parts
                .next()
                .ok_or_else(|| DspError::Parse(format!("line {}: missing {name}", lineno + 1)))
        };
        let f: f64 = next("freq")?
            .parse()
            .map_err(|e| DspError::Parse(format!("line {}: {e}", lineno + 1)))?;
        let p: f64 = next("psd")?
            .parse()
            .map_err(|e| DspError::Parse(format!("line {}: {e}", lineno + 1)))?;
        let m: u8 = next("mask")?
            .parse()
            .map_err(|e| DspError::Parse(format!("line {}: {e}", lineno + 1)))?;
        freqs.push(f);
        psd.push(p);
        mask.push(m != 0);
    }
    let meta_json = std::fs::read_to_string(base.with_extension("meta.json"))?;
    let meta: SpectrumMeta = serde_json::from_str(&meta_json)?;
    Ok(SpectrumRecord { freqs, psd, mask, meta })
}
