//! Runs every acceptance check and prints one line per criterion.

use std::process::ExitCode;
use std::time::Instant;

use fade10g::acceptance::{check_determinism, CHECKS};

fn main() -> ExitCode {
    let mut outcomes = Vec::new();
    for check in CHECKS {
        let start = Instant::now();
        let o = check();
        println!("{} [{:.1?}]", o.line(), start.elapsed());
        outcomes.push(o);
    }
    let start = Instant::now();
    let d = check_determinism(&outcomes);
    println!("{} [{:.1?}]", d.line(), start.elapsed());
    outcomes.push(d);

    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
