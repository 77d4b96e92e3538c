use sge_core::selfcheck::run_selfcheck;

#[test]
fn every_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let results = run_selfcheck(Some(dir.path())).unwrap();
    for r in &results {
        println!("{} {} {}", r.name, r.passed, r.detail);
    }
    assert!(results.iter().any(|r| r.name == "conv2d"));
    assert!(results.iter().all(|r| r.passed));
    assert!(dir.path().join("conv2d.input0.tnsr").exists());
}
