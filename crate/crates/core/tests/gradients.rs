use lecaps_core::gradcheck::{check_case, OpCase};

const INSTANCES: u64 = 10;
const TOLERANCE: f64 = 1e-4;

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for case in OpCase::ALL {
        let worst = (0..INSTANCES)
            .map(|seed| check_case(case, seed).unwrap().max_rel_error())
            .fold(0.0, f64::max);
        if worst.is_nan() || worst >= TOLERANCE {
            failures.push(format!("{}: {worst:.3e}", case.name()));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}
