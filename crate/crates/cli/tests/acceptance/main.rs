//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 5 to 7 are directional comparisons of trained models on small
//! synthetic benchmarks. Their lines are reported like the others but do not
//! change the exit status; every other criterion does.
//!
//! `ACCEPTANCE_CRITERIA=1,2,9` restricts the run to the listed criteria.

mod benchmark;
mod common;
mod gradients;
mod oracles;

use std::process::ExitCode;
use std::time::Instant;

use common::Outcome;

const EMPIRICAL: [u32; 3] = [5, 6, 7];

fn selected() -> Vec<u32> {
    match std::env::var("ACCEPTANCE_CRITERIA") {
        Ok(list) if !list.trim().is_empty() => list
            .split(',')
            .map(|s| s.trim().parse().expect("ACCEPTANCE_CRITERIA holds criterion numbers"))
            .collect(),
        _ => (1..=9).collect(),
    }
}

fn or_fail(r: Result<Outcome, String>) -> Outcome {
    r.unwrap_or_else(|e| Outcome::new(false, format!("could not run: {e}")))
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as --quiet; there are none to honour.
    let want = selected();
    let mut lines: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        lines.push((n, name, o));
    };
    let start = Instant::now();
    if want.contains(&1) {
        report(1, "gradient suite", gradients::run());
    }
    if want.contains(&2) {
        report(2, "oracle equivalence", oracles::oracle_equivalence());
    }
    if want.contains(&3) {
        report(3, "fusion endpoints", oracles::fuse_endpoints());
    }
    if want.contains(&4) {
        let (beta, k1) = oracles::loss_reductions();
        let adapt = or_fail(determinism::adapt_zero_matches_infer());
        let pass = beta.pass && k1.pass && adapt.pass;
        report(
            4,
            "degenerate configurations",
            Outcome::new(pass, format!("{}; {}; {}", beta.detail, adapt.detail, k1.detail)),
        );
    }
    if want.iter().any(|n| EMPIRICAL.contains(n)) {
        let b = benchmark::run();
        if want.contains(&5) {
            report(5, "fusion ablation", b.fusion);
        }
        if want.contains(&6) {
            report(6, "variance weighting ablation", b.variance);
        }
        if want.contains(&7) {
            report(7, "online adaptation", b.adaptation);
        }
    }
    if want.contains(&8) {
        report(8, "metric examples", oracles::metric_examples());
    }
    if want.contains(&9) {
        report(9, "determinism", or_fail(determinism::repeat_commands()));
    }

    let passed = lines.iter().filter(|(_, _, o)| o.pass).count();
    println!("{passed}/{} criteria passed in {:.0}s", lines.len(), start.elapsed().as_secs_f64());
    let hard_failure = lines.iter().any(|(n, _, o)| !o.pass && !EMPIRICAL.contains(n));
    if hard_failure {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
