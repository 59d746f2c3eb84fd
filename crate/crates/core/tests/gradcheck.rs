use metaemb::autodiff::fault;
use metaemb::experiment::{grad_check, GradCheckConfig};
use metaemb::Variant;

#[test]
fn default_suites_pass() {
    let report = grad_check(&GradCheckConfig::default()).unwrap();
    print!("{report}");
    assert!(report.passed());
    assert_eq!(report.suites.len(), 6 + 6 + 2);
}

#[test]
fn corrupted_derivative_is_caught() {
    let cfg = GradCheckConfig {
        models: vec![Variant::Fm],
        instances: 3,
        meta_configs: 2,
        ..GradCheckConfig::default()
    };
    fault::set_sigmoid_grad_error(1e-2);
    let report = grad_check(&cfg);
    fault::set_sigmoid_grad_error(0.0);
    let report = report.unwrap();
    assert!(!report.passed());
    assert!(!report.suite("first_order/fm").unwrap().passed());
}

#[test]
fn size_guard_rejects_wide_embeddings() {
    let cfg = GradCheckConfig {
        dim: 256,
        ..GradCheckConfig::default()
    };
    assert!(grad_check(&cfg).unwrap_err().is_validation());
}
