mod common;

use common::{loss_gradient_errors, tiny_model_gradient_error};

#[test]
fn loss_gradients_match_finite_differences() {
    for (name, err) in loss_gradient_errors(6) {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn tiny_model_gradient_matches_finite_differences() {
    for seed in [1, 2] {
        let err = tiny_model_gradient_error(seed);
        assert!(err < 1e-3, "seed {seed}: relative error {err:e}");
    }
}
