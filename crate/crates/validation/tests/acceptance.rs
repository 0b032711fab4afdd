//! Prints one line per acceptance criterion and fails if any criterion does.

use std::process::ExitCode;
use std::time::Instant;

fn main() -> ExitCode {
    let mut failed = Vec::new();
    for (i, criterion) in mixoram_validation::all().into_iter().enumerate() {
        let start = Instant::now();
        let v = criterion();
        println!("{v} ({:.1}s)", start.elapsed().as_secs_f64());
        if !v.passed {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
