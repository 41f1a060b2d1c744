#![cfg(not(feature = "single-precision"))]

use pertdiff::gradcheck::run_suite;

#[test]
fn every_gradient_matches_finite_differences() {
    let report = run_suite().unwrap();
    for r in &report {
        println!("{:<20} n={:<5} max_rel={:.3e} tol={:.0e}", r.name, r.checked, r.max_rel_err, r.tolerance);
    }
    let failed: Vec<_> = report.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
