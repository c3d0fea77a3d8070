mod common;

use common::loss_check::{cases, max_error};

#[test]
fn full_loss_passes_finite_differences() {
    for case in cases() {
        let err = max_error(&case, 3, 40);
        assert!(err < 1e-4, "{}: {err:e}", case.name);
    }
}
