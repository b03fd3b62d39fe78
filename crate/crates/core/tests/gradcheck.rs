mod support;

use support::gradcheck::{op_cases, run_full_graph, run_op, TOL};

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in op_cases() {
        let worst = run_op(&case).unwrap();
        if !(worst <= TOL) {
            failures.push(format!("{}: {worst:.3e}", case.0));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn full_graph_matches_finite_differences() {
    for s in 0..support::gradcheck::SEEDS {
        let e = run_full_graph(s).unwrap();
        assert!(e <= TOL, "seed {s}: {e:.3e}");
    }
}
