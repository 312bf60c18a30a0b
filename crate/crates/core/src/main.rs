//! Command-line surface of the spin-noise scaling simulator.
//!
//! Subcommands mirror the pipeline stages: `simulate` (one trajectory),
//! `demod` (one cell's noise spectra), `fit` (noise decomposition of a stored
//! spectrum), `sweep` (the full campaign), `report` (scaling tables from a
//! finished sweep), and `selftest` (the built-in verification suite).
//! Exit codes: 0 success, 1 user error (bad input or flags), 2 internal
//! error; failures print a machine-readable JSON object to stderr.

use clap::{Parser, Subcommand, ValueEnum};
use hopmsim::config::{load_config, parse_config, RunConfig};
use hopmsim::dsp::{read_spectrum, write_spectrum, Channel};
use hopmsim::fit::{bootstrap_fit, fit_spectrum_auto, total_power, BootstrapMode, FitError};
use hopmsim::probe::ProbeKind;
use hopmsim::report::{build_tables, load_cells, write_report, write_sweep, ReportError};
use hopmsim::scaling::{cell_seed, run_campaign, simulate_cell_spectra, CellSpec};
use hopmsim::sde::{TrajectoryConfig, TrajectorySimulator};
use hopmsim::selftest::run_selftest;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "hopmsim",
    version,
    about = "Simulator and analysis toolkit for quantum-noise scaling in a \
             continuously probed spin-precession magnetometer"
)]
struct Cli {
    /// Configuration file (TOML). Omit to run on built-in defaults;
    /// HOPMSIM_* environment variables override individual keys either way.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the campaign base seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: the configured output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for campaign cells (0 = one per CPU).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Demodulated channel(s) to process.
    #[arg(long, global = true, value_enum, default_value_t = ChannelArg::Both)]
    channel: ChannelArg,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ChannelArg {
    Dc,
    Rf,
    Both,
}

impl ChannelArg {
    fn channels(self) -> Vec<Channel> {
        match self {
            ChannelArg::Dc => vec![Channel::Dc],
            ChannelArg::Rf => vec![Channel::Rf],
            ChannelArg::Both => vec![Channel::Dc, Channel::Rf],
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Coherent,
    Squeezed,
    Antisqueezed,
}

impl KindArg {
    fn kind(self) -> ProbeKind {
        match self {
            KindArg::Coherent => ProbeKind::Coherent,
            KindArg::Squeezed => ProbeKind::Squeezed,
            KindArg::Antisqueezed => ProbeKind::Antisqueezed,
        }
    }
}

#[derive(clap::Args)]
struct CellArgs {
    /// Probe power, mW.
    #[arg(long, default_value_t = 3.0)]
    probe_power: f64,
    /// Pump power, uW (ignored with --unpolarized).
    #[arg(long, default_value_t = 10.0)]
    pump_power: f64,
    /// Probe quantum state.
    #[arg(long, value_enum, default_value_t = KindArg::Coherent)]
    probe_kind: KindArg,
    /// Block the pump (unpolarized reference cell).
    #[arg(long)]
    unpolarized: bool,
    /// Recorded duration, s (default: the configured cell duration).
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate one spin trajectory and write it as CSV.
    Simulate {
        #[command(flatten)]
        cell: CellArgs,
        /// Keep every n-th sample in the output file.
        #[arg(long, default_value_t = 1)]
        every: usize,
    },
    /// Simulate one cell and write its demodulated noise spectra.
    Demod {
        #[command(flatten)]
        cell: CellArgs,
    },
    /// Fit a stored spectrum and print the noise decomposition as JSON.
    Fit {
        /// Spectrum base path: reads <input>.csv and <input>.meta.json
        /// (a trailing .csv is accepted and stripped).
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the full scaling campaign and persist spectra, fits, and manifest.
    Sweep,
    /// Build scaling tables and figure data from a finished sweep.
    Report {
        /// Sweep directory (default: the output directory).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the built-in verification suite (fixed reference configuration).
    Selftest,
}

enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
    fn json(&self) -> String {
        let (kind, message) = match self {
            CliError::User(m) => ("user", m),
            CliError::Internal(m) => ("internal", m),
        };
        serde_json::json!({"error": {"kind": kind, "message": message}}).to_string()
    }
}

fn user<E: std::fmt::Display>(e: E) -> CliError {
    CliError::User(e.to_string())
}

fn internal<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Internal(e.to_string())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            let err = CliError::User(e.to_string());
            eprintln!("{}", err.json());
            std::process::exit(err.code());
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("{}", err.json());
            std::process::exit(err.code());
        }
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path).map_err(user)?,
        None => {
            let env: Vec<(String, String)> = std::env::vars().collect();
            parse_config("", &env).map_err(user)?
        }
    };
    if let Some(seed) = cli.seed {
        cfg.grid.base_seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone())
}

fn cell_spec(cell: &CellArgs) -> CellSpec {
    CellSpec {
        probe_kind: cell.probe_kind.kind(),
        p_pr: cell.probe_power,
        p_pu: if cell.unpolarized { 0.0 } else { cell.pump_power },
        polarized: !cell.unpolarized,
        replicate: 0,
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Simulate { cell, every } => cmd_simulate(&cli, cell, *every),
        Cmd::Demod { cell } => cmd_demod(&cli, cell),
        Cmd::Fit { input } => cmd_fit(&cli, input),
        Cmd::Sweep => cmd_sweep(&cli),
        Cmd::Report { input } => cmd_report(&cli, input.as_deref()),
        Cmd::Selftest => cmd_selftest(&cli),
    }
}

fn cmd_simulate(cli: &Cli, cell: &CellArgs, every: usize) -> Result<(), CliError> {
    if every == 0 {
        return Err(CliError::User("--every must be >= 1".into()));
    }
    let mut cfg = effective_config(cli)?;
    // A raw trajectory is huge at the full step rate; default to a short
    // window unless the user asked for a specific duration.
    let duration = cell.duration.unwrap_or(0.05);
    cfg.sim.duration = duration;
    let spec = cell_spec(cell);
    let drive = cfg.drive_for(spec.p_pu, spec.p_pr, spec.polarized);
    let probe = cfg.probe_state(spec.probe_kind);
    let det = cfg.detector_config();
    let traj = TrajectoryConfig {
        dt: cfg.dt(),
        duration,
        burn_in: cfg.sim.burn_in,
        seed: cell_seed(cfg.grid.base_seed, spec.p_pr, spec.replicate),
    };
    let mut sim =
        TrajectorySimulator::new(&cfg.physical, &drive, &probe, &traj).map_err(user)?;
    sim.run_burn_in(traj.burn_in).map_err(internal)?;

    let n = (duration / traj.dt).round() as usize;
    let mut out = String::from("t_s,f_x,f_y,f_z,det_uv\n");
    for i in 0..n {
        let (state, stokes) = sim.advance().map_err(internal)?;
        if i % every == 0 {
            let v = det.transduce(state.f.z, stokes.s1, stokes.s2_noise);
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                state.t, state.f.x, state.f.y, state.f.z, v
            );
        }
    }
    let dir = out_dir(cli, &cfg);
    std::fs::create_dir_all(&dir).map_err(user)?;
    let path = dir.join("trajectory.csv");
    std::fs::write(&path, out).map_err(user)?;
    println!(
        "wrote {} ({} samples, {:.3} s at dt = {:.3e} s, {} soft-bound excursions)",
        path.display(),
        n.div_ceil(every),
        duration,
        traj.dt,
        sim.excursion_count()
    );
    Ok(())
}

fn cmd_demod(cli: &Cli, cell: &CellArgs) -> Result<(), CliError> {
    let mut cfg = effective_config(cli)?;
    if let Some(d) = cell.duration {
        cfg.sim.duration = d;
    }
    let spec = cell_spec(cell);
    let (dc, rf) = simulate_cell_spectra(&cfg, &spec).map_err(internal)?;
    let dir = out_dir(cli, &cfg).join("demod");
    for (channel, rec) in [(Channel::Dc, &dc), (Channel::Rf, &rf)] {
        if !cli.channel.channels().contains(&channel) {
            continue;
        }
        let subdir = dir.join(channel.label());
        std::fs::create_dir_all(&subdir).map_err(user)?;
        let base = subdir.join("spectrum");
        write_spectrum(rec, &base).map_err(user)?;
        println!(
            "wrote {}.csv ({} bins, {} segments)",
            base.display(),
            rec.freqs.len(),
            rec.meta.n_segments
        );
    }
    Ok(())
}

fn cmd_fit(cli: &Cli, input: &std::path::Path) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    let base = if input.extension().is_some_and(|e| e == "csv") {
        input.with_extension("")
    } else {
        input.to_path_buf()
    };
    let rec = read_spectrum(&base).map_err(user)?;
    let map_fit_err = |e: FitError| match e {
        FitError::Config(_) | FitError::InsufficientData { .. } => user(e),
        FitError::NonConvergence { .. } | FitError::BootstrapUnstable { .. } => internal(e),
    };
    let fit = fit_spectrum_auto(&rec, rec.meta.xi2).map_err(map_fit_err)?;
    let seed = cell_seed(cfg.grid.base_seed, rec.meta.p_pr_mw, 0);
    let boot = bootstrap_fit(&rec, rec.meta.xi2, cfg.fit.n_boot, BootstrapMode::Parametric, seed)
        .map_err(map_fit_err)?;
    let decomposition = serde_json::json!({
        "input": base.display().to_string(),
        "fit": fit,
        "floor_uv2_per_hz": fit.model.floor(),
        "atomic_total_uv2": total_power(fit.model.s_atomic, fit.model.delta_f),
        "bootstrap": boot,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&decomposition).map_err(internal)?
    );
    Ok(())
}

fn cmd_sweep(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = effective_config(cli)?;
    if cli.channel != ChannelArg::Both {
        cfg.grid.channels = cli.channel.channels();
    }
    let result = run_campaign(&cfg, cli.jobs).map_err(internal)?;
    if result.cells.is_empty() {
        let first = result
            .failures
            .first()
            .map(|f| f.error.clone())
            .unwrap_or_else(|| "empty campaign".into());
        return Err(CliError::Internal(format!("every cell failed; first error: {first}")));
    }
    let dir = out_dir(cli, &cfg);
    let root = write_sweep(&cfg, &result, &dir).map_err(map_report_err)?;
    println!(
        "sweep complete: {} cell summaries, {} failures; results in {}",
        result.cells.len(),
        result.failures.len(),
        root.display()
    );
    Ok(())
}

fn map_report_err(e: ReportError) -> CliError {
    match e {
        ReportError::NoCells(_) | ReportError::Store(_) => user(e),
        ReportError::Scaling(_) | ReportError::Serialize(_) => internal(e),
    }
}

fn cmd_report(cli: &Cli, input: Option<&std::path::Path>) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    let dir = input
        .map(PathBuf::from)
        .unwrap_or_else(|| out_dir(cli, &cfg));
    // Prefer the configuration snapshot stored with the sweep, so table
    // conventions match the run that produced the cells.
    let sweep_cfg_path = dir.join("config.toml");
    let exclude_top = if sweep_cfg_path.is_file() {
        load_config(&sweep_cfg_path).map_err(user)?.fit.exclude_top_power_in_peak_fit
    } else {
        cfg.fit.exclude_top_power_in_peak_fit
    };
    let cells = load_cells(&dir).map_err(map_report_err)?;
    let tables = build_tables(&cells, exclude_top).map_err(internal)?;
    write_report(&cells, &tables, &dir).map_err(map_report_err)?;
    println!(
        "report complete: {} floor fits, {} spin-noise fits, {} back-action fits; \
         tables and figure data in {}",
        tables.psn.len(),
        tables.spn.len(),
        tables.mba.len(),
        dir.join("tables").display()
    );
    Ok(())
}

fn cmd_selftest(cli: &Cli) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    let scratch = out_dir(cli, &cfg).join("selftest-scratch");
    std::fs::create_dir_all(&scratch).map_err(user)?;
    let results = run_selftest(cli.jobs, &scratch);
    for r in &results {
        println!("{}", r.line());
    }
    let n_pass = results.iter().filter(|r| r.passed).count();
    let total: f64 = results.iter().map(|r| r.runtime_s).sum();
    println!("selftest: {n_pass}/{} checks passed in {total:.0} s", results.len());
    if n_pass < results.len() {
        let failed: Vec<&str> =
            results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        return Err(CliError::User(format!("selftest failed: {}", failed.join(", "))));
    }
    Ok(())
}
