mod common;

use common::gradcheck::gradient_suite;

#[test]
fn every_op_matches_finite_differences_over_20_seeds() {
    for seed in 0..20 {
        for (op, err) in gradient_suite(seed) {
            assert!(err < 1e-4, "{op} at seed {seed}: relative error {err:e}");
        }
    }
}
