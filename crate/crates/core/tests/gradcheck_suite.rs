//! Finite-difference verification of every registered differentiable op,
//! 10 seeds each at 64-bit with h = 1e-5.

use hnas_core::ndtensor::gradcheck::op_battery;

#[test]
fn every_op_matches_finite_differences() {
    let results = op_battery(10, 1e-5).expect("battery runs");
    assert!(results.len() >= 25, "expected a full battery, got {}", results.len());
    let mut failed = Vec::new();
    for r in &results {
        println!("gradcheck {:<28} max rel err {:.3e} ({} seeds)", r.name, r.max_rel_err, r.seeds);
        if r.max_rel_err > 1e-4 {
            failed.push((r.name, r.max_rel_err));
        }
    }
    assert!(failed.is_empty(), "ops over tolerance: {failed:?}");
}
