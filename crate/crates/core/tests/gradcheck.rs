use codetr::harness::gradcheck::{grad_check, relative_error};

#[test]
fn loss_gradients_match_central_differences() {
    let report = grad_check(5, 1e-5, 17).unwrap();
    assert!(report.entries > 0);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn relative_error_uses_floor_for_vanishing_gradients() {
    assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
    assert!(relative_error(1e-12, -1e-12, 1e-6) < 1e-5);
    assert!((relative_error(1.0, 0.5, 1e-6) - 0.5).abs() < 1e-15);
    assert!((relative_error(1e-3, 0.0, 1e-4) - 1.0).abs() < 1e-15);
}
