//! Runs every bundled scenario and prints its outcome.

use std::time::Instant;

use bayguard::scenario::{bundled, evaluate, run, BUNDLED, REFERENCE};

fn main() {
    for (name, _) in BUNDLED.iter().chain(REFERENCE) {
        let cfg = bundled(name).expect("bundled config parses");
        let t0 = Instant::now();
        let result = run(&cfg).expect("bundled config is valid");
        let report = evaluate(&result);
        println!(
            "{:<24} {} {:>6.2}s trip={:?} block={:?} counts={:?}",
            name,
            if report.passed { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64(),
            report.timing.first_trip,
            report.timing.first_block,
            report.event_counts
        );
        for e in report.expectations.iter().filter(|e| !e.passed) {
            println!("    {}", e.message);
        }
    }
}
