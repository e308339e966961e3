//! Runs the ten release gates and prints one PASS/FAIL line per gate.
//!
//! ```text
//! cargo run --release -p lrp-core --example acceptance            # all gates
//! cargo run --release -p lrp-core --example acceptance -- 1 3 10  # a subset
//! ```
//!
//! The exit status is nonzero when any selected gate fails.

use std::path::Path;
use std::process::{Command, ExitCode};

use clap::Parser;
use lrp_core::acceptance::{self, Scale};
use lrp_core::cli::Cli;
use lrp_core::selfcheck::CheckResult;
use lrp_core::{Error, Result};

const SEED: u64 = 0;
const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];

/// Child mode for the determinism gate: `acceptance lrp <cli args>`.
fn child(args: Vec<String>) -> ExitCode {
    match lrp_core::cli::run(Cli::parse_from(args)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn train_in_child(config: &Path, threads: usize, out: &Path) -> Result<()> {
    let exe = std::env::current_exe().map_err(|e| Error::Invariant(format!("current exe: {e}")))?;
    let status = Command::new(exe)
        .arg("lrp")
        .arg("train")
        .arg("--config")
        .arg(config)
        .arg("--threads")
        .arg(threads.to_string())
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| Error::Invariant(format!("spawn: {e}")))?;
    if !status.status.success() {
        return Err(Error::Invariant(format!(
            "train --threads {threads} failed: {}",
            String::from_utf8_lossy(&status.stderr)
        )));
    }
    Ok(())
}

fn gate(n: usize) -> Result<CheckResult> {
    match n {
        1 => acceptance::pooling_oracle(SEED, Scale::Full),
        2 => acceptance::cascade_oracle(SEED, Scale::Full),
        3 => acceptance::reachability(),
        4 => acceptance::gradients(SEED, Scale::Full),
        5 => acceptance::parameter_accounting(),
        6 => acceptance::degenerate_identity(SEED, Scale::Full),
        7 => acceptance::long_range_ordering(&TRAIN_SEEDS, Scale::Full, |l| println!("{l}")),
        8 => acceptance::ablation_integrity(),
        9 => acceptance::erf_properties(SEED, Scale::Full),
        10 => {
            let dir = std::env::temp_dir().join(format!("lrp-acceptance-{}", std::process::id()));
            std::fs::create_dir_all(&dir).map_err(|e| Error::Invariant(format!("{}: {e}", dir.display())))?;
            let r = acceptance::determinism(&dir, train_in_child);
            let _ = std::fs::remove_dir_all(&dir);
            r
        }
        _ => Err(Error::Config(format!("no gate {n}; gates are 1 to 10"))),
    }
}

fn main() -> ExitCode {
    let mut args: Vec<String> = std::env::args().collect();
    if args.get(1).map(String::as_str) == Some("lrp") {
        return child(args.split_off(1));
    }
    let picked: Vec<usize> = match args[1..].iter().map(|a| a.parse()).collect::<std::result::Result<Vec<usize>, _>>() {
        Ok(v) if !v.is_empty() => v,
        Ok(_) => (1..=10).collect(),
        Err(_) => {
            eprintln!("usage: acceptance [GATE...]");
            return ExitCode::FAILURE;
        }
    };
    let mut failed = 0;
    for n in picked {
        match gate(n) {
            Ok(r) => {
                failed += usize::from(!r.passed);
                println!("{}", r.line());
            }
            Err(e) => {
                failed += 1;
                println!("FAIL gate {n}: {e}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
