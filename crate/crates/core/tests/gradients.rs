use fms_core::checks::{run, MODULES};
use fms_core::numeric::FD_TOLERANCE;

#[test]
fn every_gradient_matches_central_differences() {
    let results = run(None).unwrap();
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    for r in &results {
        eprintln!("{:>9} {:<32} {:.2e}", r.module, r.name, r.max_error);
    }
    assert!(failed.is_empty(), "above {FD_TOLERANCE}: {failed:#?}");
    for m in MODULES {
        assert!(results.iter().any(|r| r.module == m), "no checks for {m}");
    }
}

#[test]
fn module_filter_restricts_and_rejects_unknown_names() {
    let only = run(Some("mfar")).unwrap();
    assert!(!only.is_empty() && only.iter().all(|r| r.module == "mfar"));
    assert!(run(Some("encoderz")).is_err());
}
