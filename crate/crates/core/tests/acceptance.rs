//! Release gates at reduced scene counts. The full-size run is the
//! `acceptance` example.

use std::path::Path;
use std::process::Command;

use lrp_core::acceptance::{self, Scale};
use lrp_core::selfcheck::CheckResult;
use lrp_core::{Error, Result};

fn check(r: Result<CheckResult>) {
    let r = r.unwrap();
    println!("{}", r.line());
    assert!(r.passed, "{}", r.line());
}

#[test]
fn pooling_oracle() {
    check(acceptance::pooling_oracle(1, Scale::Quick));
}

#[test]
fn cascade_oracle() {
    check(acceptance::cascade_oracle(1, Scale::Quick));
}

#[test]
fn reachability() {
    check(acceptance::reachability());
}

#[test]
fn gradients() {
    check(acceptance::gradients(1, Scale::Quick));
}

#[test]
fn parameter_accounting() {
    check(acceptance::parameter_accounting());
}

#[test]
fn degenerate_identity() {
    check(acceptance::degenerate_identity(1, Scale::Quick));
}

#[test]
fn long_range_gate_runs_end_to_end() {
    // too small to learn anything; only the plumbing is exercised here
    let r = acceptance::long_range_ordering(&[0], Scale::Quick, |_| {}).unwrap();
    assert!(r.name.starts_with("7 "));
    assert!(r.detail.contains("margin"));
}

#[test]
fn ablation_integrity() {
    check(acceptance::ablation_integrity());
}

#[test]
fn erf_properties() {
    check(acceptance::erf_properties(1, Scale::Quick));
}

#[test]
fn determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |config: &Path, threads: usize, out: &Path| -> Result<()> {
        let o = Command::new(env!("CARGO_BIN_EXE_lrp"))
            .args(["train", "--threads", &threads.to_string()])
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(out)
            .output()
            .map_err(|e| Error::Invariant(e.to_string()))?;
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        Ok(())
    };
    check(acceptance::determinism(tmp.path(), run));
}
