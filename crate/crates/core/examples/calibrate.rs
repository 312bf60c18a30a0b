//! Developer tool: benchmarks integrator throughput and calibrates the
//! spin-torque coupling `g_s` so the detected back-action power at the
//! reference operating point (coherent probe, 3 mW probe, 10 uW pump, dc
//! channel) lands on the documented instrument level of ~8.64e3 uV^2.
//!
//! Back-action power scales as `g_s^2`, so each round rescales by the square
//! root of the target-to-measured ratio.
//!
//! Run with: `cargo run --release --example calibrate [duration_s]`

use hopmsim::config::RunConfig;
use hopmsim::dsp::Channel;
use hopmsim::probe::ProbeKind;
use hopmsim::scaling::{decompose_pair, run_campaign, CellSpec};
use std::time::Instant;

const TARGET_MBA_UV2: f64 = 8.64e3;

fn main() {
    let duration: f64 = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("duration must be a number of seconds"))
        .unwrap_or(8.0);

    let mut cfg = RunConfig::default();
    if let Some(gs) = std::env::args().nth(2) {
        cfg.physical.g_s = gs.parse().expect("g_s must be a number");
    }
    cfg.grid.probe_powers = vec![3.0];
    cfg.grid.pump_powers = vec![10.0];
    cfg.grid.probe_kinds = vec![ProbeKind::Coherent];
    cfg.grid.channels = vec![Channel::Dc];
    cfg.grid.polarizations = vec![true, false];
    cfg.grid.base_seed = 7;
    cfg.sim.duration = duration;
    cfg.fit.n_boot = 60;

    // --- throughput ---------------------------------------------------
    {
        let mut bench = cfg.clone();
        bench.sim.duration = 1.0;
        let spec = CellSpec {
            probe_kind: ProbeKind::Coherent,
            p_pr: 3.0,
            p_pu: 10.0,
            polarized: true,
            replicate: 0,
        };
        let start = Instant::now();
        hopmsim::scaling::simulate_cell_spectra(&bench, &spec).expect("bench cell");
        let secs = start.elapsed().as_secs_f64();
        let steps = bench.sim.duration / bench.dt();
        println!(
            "throughput: {:.2e} steps in {:.2} s -> {:.2e} steps/s (f_sim = {:.3e} Hz)",
            steps,
            secs,
            steps / secs,
            bench.f_sim()
        );
    }

    // --- g_s calibration ----------------------------------------------
    for round in 0..3 {
        let result = run_campaign(&cfg, 1).expect("campaign");
        for f in &result.failures {
            eprintln!("cell failed: {:?}: {}", f.spec, f.error);
        }
        let pol = result
            .find(ProbeKind::Coherent, Channel::Dc, 3.0, Some(10.0))
            .expect("polarized cell");
        let unpol = result
            .find(ProbeKind::Coherent, Channel::Dc, 3.0, None)
            .expect("unpolarized cell");
        let mba = decompose_pair(pol, unpol).expect("decompose");
        println!(
            "round {round}: g_s = {:.1}, spn_tot = {:.1} uV^2 (dF = {:.1} Hz), \
             mba_tot = {:.1} +- {:.1} uV^2 (dF_pol = {:.1} Hz), floor = {:.3} uV^2/Hz",
            cfg.physical.g_s,
            unpol.atomic_total,
            unpol.fit.delta_f,
            mba.total,
            mba.std_error,
            mba.delta_f_pol,
            pol.floor_detected,
        );
        if mba.total <= 0.0 {
            eprintln!("measured back-action is non-positive; increase duration");
            std::process::exit(1);
        }
        let next = cfg.physical.g_s * (TARGET_MBA_UV2 / mba.total).sqrt();
        println!("         -> rescaled g_s = {next:.1}");
        cfg.physical.g_s = next;
    }
}
