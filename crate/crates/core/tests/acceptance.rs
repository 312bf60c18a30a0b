//! Acceptance gate: one test per end-to-end verification check, printing the
//! check's `[PASS]/[FAIL]` line and asserting it passed.
//!
//! The checks share their simulated campaigns through the library's
//! per-process cache, so this binary costs roughly one full `selftest` run
//! regardless of how many tests reuse a campaign.
//!
//! Known red: `c03_backaction_scaling` asserts the design target of a cubic
//! free exponent (3.0 +/- 0.2), but the implemented dynamics yield a local
//! exponent near 2.1 over the measured window because probe broadening also
//! relaxes the very line the back-action drives. The check reports the
//! measured value and the model's own law in its details line; the target is
//! asserted as designed rather than weakened to match. See README
//! ("Back-action scaling") for the derivation and the supporting long runs.

use hopmsim::selftest::{self, CheckResult};

fn assert_check(r: CheckResult) {
    println!("{}", r.line());
    assert!(r.passed, "{}", r.line());
}

#[test]
fn c01_noise_floor_linearity() {
    assert_check(selftest::check_floor_linearity(0));
}

#[test]
fn c02_spin_noise_quadraticity() {
    assert_check(selftest::check_spin_noise_quadraticity(0));
}

#[test]
fn c03_backaction_scaling() {
    assert_check(selftest::check_backaction_scaling(0));
}

#[test]
fn c04_squeezing_transfer() {
    assert_check(selftest::check_squeezing_transfer(0));
}

#[test]
fn c05_fit_fidelity() {
    assert_check(selftest::check_fit_fidelity());
}

#[test]
fn c06_relaxation_psd() {
    assert_check(selftest::check_relaxation_psd());
}

#[test]
fn c07_bootstrap_coverage() {
    assert_check(selftest::check_bootstrap_coverage());
}

#[test]
fn c08_null_backaction() {
    assert_check(selftest::check_null_backaction(0));
}

#[test]
fn c09_channel_equivalence() {
    assert_check(selftest::check_channel_equivalence(0));
}

#[test]
fn c10_determinism() {
    let dir = tempfile::tempdir().expect("scratch dir");
    assert_check(selftest::check_determinism(0, dir.path()));
}
