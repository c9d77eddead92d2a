mod common;

use strobe_core::net::NetConfig;

#[test]
fn every_op_f64() {
    for c in common::op_checks::<f64>(1e-6) {
        assert!(c.report.passes(1e-6), "{}: {:?}", c.name, c.report);
    }
}

#[test]
fn every_op_f32_against_f64_shadow() {
    let shadow = common::op_checks::<f64>(1e-6);
    for (name, err) in common::f32_shadow_error(&common::op_checks::<f32>(1e-2), &shadow) {
        assert!(err <= 1e-3, "{name}: {err}");
    }
}

#[test]
fn three_packet_unroll_f64() {
    let r = common::bptt_report(&NetConfig::tiny(16), 8, 1e-6);
    assert!(r.passes(1e-6), "{r:?}");
    assert!(r.checked > 100);
}
