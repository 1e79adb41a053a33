//! Acceptance criteria, one line of output per criterion.
//!
//! Runs the full verification suite check by check, then the determinism
//! criterion: the fast suite twice under different worker counts must give
//! byte-identical reports. Exits nonzero if anything fails.

use std::process::ExitCode;
use std::time::Instant;

use spdelab::verify::{run_check, run_suite, Suite, CHECKS};

const SEED: u64 = 20_240_601;

fn report_with_threads(threads: usize) -> String {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(|| run_suite(Suite::Fast, SEED).to_json())
}

fn main() -> ExitCode {
    let mut failed = 0;
    for i in 0..CHECKS.len() - 1 {
        let r = run_check(i, Suite::Full, SEED);
        println!(
            "criterion {:>2} {:<32} {} lhs={:.6e} rhs={:.6e} ({} ms) {}",
            i + 1,
            r.check_id,
            if r.pass { "PASS" } else { "FAIL" },
            r.lhs,
            r.rhs,
            r.runtime_ms,
            r.detail
        );
        failed += usize::from(!r.pass);
    }

    let start = Instant::now();
    let a = report_with_threads(1);
    let b = report_with_threads(4);
    let identical = a == b;
    println!(
        "criterion 14 {:<32} {} fast suite at 1 and 4 workers, {} bytes each, identical={} ({} ms)",
        "14-determinism",
        if identical { "PASS" } else { "FAIL" },
        a.len(),
        identical,
        start.elapsed().as_millis()
    );
    failed += usize::from(!identical);

    if failed == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
