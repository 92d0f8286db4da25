//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//!
//! Uses its own harness so the lines show up under a plain `cargo test`.

use std::process::ExitCode;

use opdisc::acceptance::{run_criterion, CRITERIA, DEFAULT_SEED};

fn main() -> ExitCode {
    // Positional arguments filter by criterion id or name fragment, like libtest filters.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = CRITERIA
        .iter()
        .filter(|(id, name)| filters.is_empty() || filters.iter().any(|f| *f == id.to_string() || name.contains(f.as_str())));
    let mut failed = 0;
    let mut ran = 0;
    for (id, _) in selected {
        ran += 1;
        match run_criterion(*id, DEFAULT_SEED) {
            Ok(outcome) => {
                println!("{}", outcome.line());
                if !outcome.passed {
                    failed += 1;
                }
            }
            Err(e) => {
                println!("criterion {id:>2} FAIL error: {e}");
                failed += 1;
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
