mod common;

#[test]
fn network_gradients_match_central_differences() {
    for (name, r) in common::cases::run(6) {
        assert!(r.checked > 0 && r.nonzero > 0, "{name}: {r:?}");
        assert!(r.worst < 1e-3, "{name}: worst relative error {:.3e}", r.worst);
    }
}
