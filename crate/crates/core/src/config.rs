//! Run configuration: strict TOML parsing, environment overrides, defaults
//! with provenance, and cross-module validation.
//!
//! The defaults describe one calibrated reference instrument so that
//! simulated spectra land on a fixed absolute scale:
//!
//! - 42 kHz precession line (6 uT field at 7 GHz/T), intrinsic half-width
//!   175 Hz, probe broadening 300 s^-1 per mW;
//! - polarimeter gain chosen so the demodulated shot-noise floor rises by
//!   19.6 uV^2/Hz per mW of probe power and the spin-noise total by
//!   1853 uV^2 per mW^2;
//! - squeezed probe (0.76, 1.85), antisqueezed probe (1.85, 0.76).
//!
//! Unknown keys are rejected rather than ignored: silent typos in physics
//! parameters are the dominant user error. Every key can also be overridden
//! with `HOPMSIM_`-prefixed environment variables using `__` as the path
//! separator (e.g. `HOPMSIM_PHYSICAL__B_DC=5e-6`).

use crate::probe::{DetectorConfig, ProbeKind, ProbeState};
use crate::scaling::CampaignGrid;
use crate::sde::{DriveConfig, PhysicalParams, PumpWaveform, MAX_PHASE_PER_STEP};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config validation failed: {0}")]
    Validation(String),
    #[error("environment override {var}: {message}")]
    Env { var: String, message: String },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Where a configuration value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueSource {
    Default,
    File,
    Env,
}

/// Pump-drive defaults shared by all grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveDefaults {
    /// Peak optical pumping rate per unit pump power, s^-1 uW^-1.
    pub pump_rate_peak: f64,
    pub pump_waveform: PumpWaveform,
    /// Demodulation reference phase, rad.
    pub phase_ref: f64,
}

impl Default for DriveDefaults {
    fn default() -> Self {
        // Mean pump rate at 10 uW = 55 * 10 * 0.1 = 55 s^-1: gentle pumping,
        // 5% of the intrinsic relaxation rate.
        DriveDefaults {
            pump_rate_peak: 55.0,
            pump_waveform: PumpWaveform::Pulsed { duty: 0.2 },
            phase_ref: 0.0,
        }
    }
}

/// Polarimeter calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorDefaults {
    /// Output per unit rotation, uV/rad.
    pub gain: f64,
    /// Faraday rotation per unit spin projection per mW of probe, rad mW^-1.
    pub g_f: f64,
}

impl Default for DetectorDefaults {
    fn default() -> Self {
        // gain * g_f = 60.886 uV/mW per unit spin projection; squared it sets
        // the spin-noise total-power scale (1853 uV^2/mW^2 at unit spin
        // variance). g_f is small enough that the fully pumped ensemble at
        // 3 mW probe stays well inside the polarimeter's linear range.
        DetectorDefaults { gain: 243_544.0, g_f: 2.5e-4 }
    }
}

/// Probe quantum-state defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeDefaults {
    /// Shot-noise PSD constant kappa, rad^2 Hz^-1 mW^-1 (PSD of the detected
    /// rotation-noise quadrature per unit probe power).
    pub kappa: f64,
    /// Transmission from squeezer to detector (1 = lossless).
    pub loss_eta: f64,
    /// Detected-quadrature factor of the squeezed probe.
    pub xi2_squeezed: f64,
    /// Conjugate-quadrature factor of the squeezed probe.
    pub xibar2_squeezed: f64,
}

impl Default for ProbeDefaults {
    fn default() -> Self {
        // gain^2 * kappa = 9.8 uV^2/Hz/mW; after demodulation (which folds
        // both sidebands) the detected floor slope is 19.6 uV^2/Hz/mW.
        ProbeDefaults {
            kappa: 9.8 / (243_544.0 * 243_544.0),
            loss_eta: 1.0,
            xi2_squeezed: 0.76,
            xibar2_squeezed: 1.85,
        }
    }
}

/// Integrator defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimDefaults {
    /// Integrator step, s. `None` derives 1/(128 f_L), i.e. about 0.049 rad
    /// of precession per step.
    pub dt: Option<f64>,
    /// Recorded duration per cell after burn-in, s.
    pub duration: f64,
    /// Discarded settling time, s.
    pub burn_in: f64,
}

impl Default for SimDefaults {
    fn default() -> Self {
        SimDefaults { dt: None, duration: 20.0, burn_in: 0.006 }
    }
}

/// Demodulation and spectral-estimation defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DspDefaults {
    /// Low-pass cutoff, Hz. `None` derives 0.4 x the decimated rate.
    pub lp_cutoff: Option<f64>,
    /// Decimation factor from the simulation rate.
    pub decim: usize,
    /// Welch segment length (samples at the decimated rate).
    pub segment_len: usize,
    /// Fractional segment overlap.
    pub overlap: f64,
    /// Technical-noise bands excluded from fits, Hz.
    pub mask_bands: Vec<(f64, f64)>,
    /// Keep every n-th unmasked bin when fitting campaign spectra, so that
    /// neighbor-bin correlation from overlapped windowing does not shrink the
    /// apparent error bars.
    pub fit_bin_stride: usize,
}

impl Default for DspDefaults {
    fn default() -> Self {
        DspDefaults {
            lp_cutoff: None,
            decim: 1024,
            segment_len: 512,
            overlap: 0.5,
            mask_bands: vec![(45.0, 55.0), (3900.0, 4100.0)],
            fit_bin_stride: 2,
        }
    }
}

/// Fitting and bootstrap defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitDefaults {
    /// Bootstrap replicas per spectrum.
    pub n_boot: usize,
    /// Exclude the top probe power from quadratic peak-PSD fits (its peak is
    /// suppressed by probe-induced broadening); totals keep all points.
    pub exclude_top_power_in_peak_fit: bool,
}

impl Default for FitDefaults {
    fn default() -> Self {
        FitDefaults { n_boot: 200, exclude_top_power_in_peak_fit: true }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub physical: PhysicalParams,
    pub drive: DriveDefaults,
    pub detector: DetectorDefaults,
    pub probe: ProbeDefaults,
    pub grid: CampaignGrid,
    pub sim: SimDefaults,
    pub dsp: DspDefaults,
    pub fit: FitDefaults,
    pub output_dir: PathBuf,
    /// Provenance per key path; populated by [`parse_config`], never
    /// serialized.
    #[serde(skip)]
    pub provenance: BTreeMap<String, ValueSource>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            physical: PhysicalParams::default(),
            drive: DriveDefaults::default(),
            detector: DetectorDefaults::default(),
            probe: ProbeDefaults::default(),
            grid: CampaignGrid::default(),
            sim: SimDefaults::default(),
            dsp: DspDefaults::default(),
            fit: FitDefaults::default(),
            output_dir: PathBuf::from("out"),
            provenance: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// Precession angular frequency of the static field, rad/s.
    pub fn omega_larmor(&self) -> f64 {
        self.physical.gamma * self.physical.b_dc
    }

    /// Integrator step: explicit, or 1/(128 f_L).
    pub fn dt(&self) -> f64 {
        self.sim.dt.unwrap_or(TAU / (128.0 * self.omega_larmor()))
    }

    /// Simulation sample rate, Hz.
    pub fn f_sim(&self) -> f64 {
        1.0 / self.dt()
    }

    /// Demodulated output rate, Hz.
    pub fn f_s_out(&self) -> f64 {
        self.f_sim() / self.dsp.decim as f64
    }

    /// Demodulation low-pass cutoff, Hz.
    pub fn lp_cutoff(&self) -> f64 {
        self.dsp.lp_cutoff.unwrap_or(0.4 * self.f_s_out())
    }

    /// Widest expected spin-noise half-width on the probe-power grid, Hz.
    pub fn max_linewidth(&self) -> f64 {
        let p_max = self.grid.probe_powers.iter().cloned().fold(0.0, f64::max);
        (self.physical.gamma0 + self.physical.alpha * p_max) / TAU
    }

    /// Detector settings at the simulation rate.
    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            gain: self.detector.gain,
            g_f: self.detector.g_f,
            sample_rate: self.f_sim(),
        }
    }

    /// Probe state for one polarization class.
    pub fn probe_state(&self, kind: ProbeKind) -> ProbeState {
        let p = &self.probe;
        let mut state = match kind {
            ProbeKind::Coherent => ProbeState::coherent(p.kappa),
            ProbeKind::Squeezed => {
                ProbeState::squeezed(p.xi2_squeezed, p.xibar2_squeezed, p.kappa)
            }
            ProbeKind::Antisqueezed => {
                ProbeState::antisqueezed(p.xibar2_squeezed, p.xi2_squeezed, p.kappa)
            }
        };
        state.loss_eta = p.loss_eta;
        state
    }

    /// Drive settings for one grid cell.
    pub fn drive_for(&self, pump_power_uw: f64, probe_power_mw: f64, polarized: bool) -> DriveConfig {
        DriveConfig {
            pump_power: pump_power_uw,
            probe_power: probe_power_mw,
            omega_pump: self.omega_larmor(),
            pump_rate_peak: self.drive.pump_rate_peak,
            pump_waveform: self.drive.pump_waveform,
            polarized,
        }
    }

    /// Cross-module invariants that individual types cannot check alone.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Validation(msg));
        self.physical
            .validate()
            .map_err(|e| ConfigError::Validation(format!("physical: {e}")))?;
        self.grid
            .validate()
            .map_err(|e| ConfigError::Validation(format!("grid: {e}")))?;
        let omega_l = self.omega_larmor();
        let dt = self.dt();
        if dt * omega_l > MAX_PHASE_PER_STEP * (1.0 + 1e-12) {
            return fail(format!(
                "integrator step violates dt * omega_L <= {MAX_PHASE_PER_STEP}: \
                 dt = {dt:.3e} s gives {:.4} rad/step",
                dt * omega_l
            ));
        }
        if !(self.detector.gain > 0.0 && self.detector.g_f > 0.0) {
            return fail(format!(
                "detector gain and g_f must be positive, got ({}, {})",
                self.detector.gain, self.detector.g_f
            ));
        }
        if !(self.probe.kappa >= 0.0) {
            return fail(format!("probe kappa must be >= 0, got {}", self.probe.kappa));
        }
        for kind in [ProbeKind::Coherent, ProbeKind::Squeezed, ProbeKind::Antisqueezed] {
            self.probe_state(kind)
                .validate()
                .map_err(|e| ConfigError::Validation(format!("probe ({}): {e}", kind.label())))?;
        }
        if !(self.drive.pump_rate_peak >= 0.0) {
            return fail(format!(
                "drive pump_rate_peak must be >= 0, got {}",
                self.drive.pump_rate_peak
            ));
        }
        if self.dsp.decim == 0 {
            return fail("dsp decim must be >= 1".into());
        }
        if self.dsp.segment_len < 8 || self.dsp.segment_len % 2 != 0 {
            return fail(format!(
                "dsp segment_len must be an even number >= 8, got {}",
                self.dsp.segment_len
            ));
        }
        if !(0.0..1.0).contains(&self.dsp.overlap) {
            return fail(format!("dsp overlap must lie in [0, 1), got {}", self.dsp.overlap));
        }
        if self.dsp.fit_bin_stride == 0 {
            return fail("dsp fit_bin_stride must be >= 1".into());
        }
        let f_s_out = self.f_s_out();
        let lp = self.lp_cutoff();
        if !(lp > 0.0 && lp < 0.5 * f_s_out) {
            return fail(format!(
                "lp_cutoff must lie in (0, f_s_out/2) = (0, {}), got {lp}",
                0.5 * f_s_out
            ));
        }
        // The decimated rate must comfortably contain the analysis bandwidth:
        // at least 4x the widest expected spin-noise half-width.
        let needed = 4.0 * self.max_linewidth();
        if f_s_out < needed {
            return fail(format!(
                "decimated rate {f_s_out:.1} Hz is below 4x the widest linewidth \
                 ({needed:.1} Hz); reduce decim or the probe power range"
            ));
        }
        if !(self.sim.duration >= 0.0 && self.sim.duration.is_finite()) {
            return fail(format!("sim duration must be finite and >= 0, got {}", self.sim.duration));
        }
        if !(self.sim.burn_in * self.physical.gamma0 >= 5.0) {
            return fail(format!(
                "sim burn_in must cover at least 5 relaxation times (>= {:.3e} s), got {:.3e}",
                5.0 / self.physical.gamma0,
                self.sim.burn_in
            ));
        }
        if self.fit.n_boot == 0 {
            return fail("fit n_boot must be >= 1".into());
        }
        Ok(())
    }
}

const ENV_PREFIX: &str = "HOPMSIM_";

fn toml_leaf_paths(value: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                toml_leaf_paths(v, &path, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    // Interpret the string as a TOML literal when possible, else keep it as
    // a plain string ("squeezed" etc.).
    let attempt: Result<toml::Table, _> = toml::from_str(&format!("v = {raw}"));
    match attempt {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn insert_path(
    table: &mut toml::Table,
    path: &[String],
    value: toml::Value,
    var: &str,
) -> Result<(), ConfigError> {
    let (head, rest) = path.split_first().expect("non-empty path");
    if rest.is_empty() {
        table.insert(head.clone(), value);
        return Ok(());
    }
    let entry = table
        .entry(head.clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => insert_path(t, rest, value, var),
        _ => Err(ConfigError::Env {
            var: var.to_string(),
            message: format!("path segment '{head}' is not a table"),
        }),
    }
}

/// Parses a TOML document into a validated [`RunConfig`].
///
/// Missing keys take documented defaults; unknown or duplicate keys are
/// errors. `env` supplies overrides (pass the process environment filtered to
/// the `HOPMSIM_` prefix, or an empty slice in tests): variable
/// `HOPMSIM_A__B=x` sets key `a.b`. The returned config records, per key
/// path, whether its value came from the file, the environment, or defaults.
pub fn parse_config(text: &str, env: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let user_table: toml::Table =
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let mut file_paths = Vec::new();
    toml_leaf_paths(&toml::Value::Table(user_table.clone()), "", &mut file_paths);

    let mut merged = user_table;
    let mut env_paths = Vec::new();
    let mut env_sorted: Vec<&(String, String)> =
        env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env_sorted.sort();
    for (var, raw) in env_sorted {
        let path: Vec<String> = var[ENV_PREFIX.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        if path.iter().any(|s| s.is_empty()) {
            return Err(ConfigError::Env {
                var: var.clone(),
                message: "empty path segment".into(),
            });
        }
        insert_path(&mut merged, &path, parse_env_value(raw), var)?;
        env_paths.push(path.join("."));
    }

    let mut cfg: RunConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;

    // Provenance: every leaf of the fully-populated config is either from the
    // environment, the file, or a default.
    let full = toml::Value::try_from(&cfg)
        .map_err(|e| ConfigError::Parse(format!("provenance serialization: {e}")))?;
    let mut all_paths = Vec::new();
    toml_leaf_paths(&full, "", &mut all_paths);
    let in_file = |p: &str| {
        file_paths.iter().any(|f| f == p || p.starts_with(&format!("{f}.")) || f.starts_with(&format!("{p}.")))
    };
    for path in all_paths {
        let source = if env_paths.iter().any(|e| *e == path) {
            ValueSource::Env
        } else if in_file(&path) {
            ValueSource::File
        } else {
            ValueSource::Default
        };
        cfg.provenance.insert(path, source);
    }
    Ok(cfg)
}

/// Reads and parses a config file, applying `HOPMSIM_` overrides from the
/// process environment.
pub fn load_config(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    let env: Vec<(String, String)> = std::env::vars().collect();
    parse_config(&text, &env)
}

/// Serializes a config back to TOML (used for the round-trip property and to
/// snapshot the effective configuration next to results).
pub fn serialize_config(cfg: &RunConfig) -> Result<String, ConfigError> {
    toml::to_string_pretty(cfg).map_err(|e| ConfigError::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn defaults_give_42_khz_line() {
        let cfg = parse_config("", &[]).unwrap();
        let f_l = cfg.omega_larmor() / TAU;
        assert!((f_l - 42_000.0).abs() < 1.0, "f_L = {f_l}");
        // Derived sampling chain.
        assert!((cfg.f_sim() - 128.0 * 42_000.0).abs() < 1.0);
        assert!((cfg.f_s_out() - 5250.0).abs() < 1.0);
        assert!((cfg.lp_cutoff() - 2100.0).abs() < 1.0);
        // Step obeys the phase-per-step limit with the default field.
        assert!(cfg.dt() * cfg.omega_larmor() <= 0.05);
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let text = r#"
            [physical]
            b_dc = 6e-6

            [grid]
            probe_powers = [1.0, 2.0, 3.0]
        "#;
        let cfg = parse_config(text, &[]).unwrap();
        assert_eq!(cfg.grid.probe_powers, vec![1.0, 2.0, 3.0]);
        assert!((cfg.omega_larmor() - TAU * 42_000.0).abs() / (TAU * 42_000.0) < 1e-9);
        assert_eq!(cfg.provenance.get("physical.b_dc"), Some(&ValueSource::File));
        assert_eq!(cfg.provenance.get("physical.gamma0"), Some(&ValueSource::Default));
        assert_eq!(cfg.provenance.get("dsp.decim"), Some(&ValueSource::Default));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = "[physical]\nb_dcc = 6e-6\n";
        match parse_config(text, &[]) {
            Err(ConfigError::Parse(msg)) => {
                assert!(msg.contains("b_dcc"), "message should name the key: {msg}")
            }
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let text = "[sim]\nduration = 1.0\nduration = 2.0\n";
        assert!(matches!(parse_config(text, &[]), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn coarse_step_is_rejected_by_validation() {
        let text = "[sim]\ndt = 1e-6\n"; // dt * omega_L = 0.264 rad
        match parse_config(text, &[]) {
            Err(ConfigError::Validation(msg)) => {
                assert!(msg.contains("omega_L"), "message: {msg}")
            }
            other => panic!("expected ValidationError, got {other:?}"),
        }
    }

    #[test]
    fn env_overrides_file_and_records_provenance() {
        let text = "[physical]\nb_dc = 6e-6\n";
        let env = vec![
            ("HOPMSIM_PHYSICAL__B_DC".to_string(), "3e-6".to_string()),
            ("HOPMSIM_SIM__DURATION".to_string(), "2.5".to_string()),
            ("UNRELATED".to_string(), "ignored".to_string()),
        ];
        let cfg = parse_config(text, &env).unwrap();
        assert_eq!(cfg.physical.b_dc, 3e-6);
        assert_eq!(cfg.sim.duration, 2.5);
        assert_eq!(cfg.provenance.get("physical.b_dc"), Some(&ValueSource::Env));
        assert_eq!(cfg.provenance.get("sim.duration"), Some(&ValueSource::Env));
    }

    #[test]
    fn config_round_trips_through_serialization() {
        let mut cfg = parse_config("[sim]\nduration = 3.25\n", &[]).unwrap();
        cfg.provenance.clear();
        let text = serialize_config(&cfg).unwrap();
        let mut back = parse_config(&text, &[]).unwrap();
        back.provenance.clear();
        assert_eq!(cfg, back);
    }

    #[test]
    fn probe_states_follow_kind_conventions() {
        let cfg = RunConfig::default();
        let sq = cfg.probe_state(ProbeKind::Squeezed);
        let asq = cfg.probe_state(ProbeKind::Antisqueezed);
        assert_eq!(sq.xi2, 0.76);
        assert_eq!(sq.xibar2, 1.85);
        assert_eq!(asq.xi2, 1.85);
        assert_eq!(asq.xibar2, 0.76);
        // Default chain: shot-noise floor slope after demodulation.
        let demod_slope =
            2.0 * cfg.detector.gain * cfg.detector.gain * cfg.probe.kappa;
        assert!((demod_slope - 19.6).abs() < 1e-9, "slope {demod_slope}");
        // Spin-noise total-power scale: (gain * g_f)^2 * sigma_f2 / 2 per mW^2.
        let k = cfg.detector.gain * cfg.detector.g_f;
        let a2_tot = k * k * cfg.physical.sigma_f2 / 2.0;
        assert!((a2_tot - 1853.5).abs() < 0.1, "a2_tot {a2_tot}");
        // Peak-PSD scale at low power: 2 k^2 sigma_f2 / gamma0 = 6.74.
        let a2 = 2.0 * k * k * cfg.physical.sigma_f2 / cfg.physical.gamma0;
        assert!((a2 - 6.74).abs() < 0.01, "a2 {a2}");
        // Intrinsic half-width.
        let df0 = cfg.physical.gamma0 / TAU;
        assert!((df0 - 175.0).abs() < 0.1, "delta_f0 {df0}");
        let _ = PI;
    }

    #[test]
    fn bandwidth_guard_rejects_excessive_decimation() {
        let text = "[dsp]\ndecim = 16384\n";
        match parse_config(text, &[]) {
            Err(ConfigError::Validation(msg)) => {
                assert!(msg.contains("linewidth") || msg.contains("lp_cutoff"), "msg: {msg}")
            }
            other => panic!("expected ValidationError, got {other:?}"),
        }
    }
}
