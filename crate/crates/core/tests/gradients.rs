mod common;

use common::grads::all_reports;

#[test]
fn every_primitive_and_the_full_model_pass_finite_differences() {
    let reports = all_reports();
    assert!(reports.len() >= 29);
    for (name, r) in &reports {
        assert!(r.checked > 0, "{name} checked nothing");
        assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
    }
}
