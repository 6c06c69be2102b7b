use std::time::Instant;

use vitbis::gradsuite::{run_gradient_suite, PRIMITIVES};

#[test]
fn every_primitive_passes_over_five_seeds() {
    let start = Instant::now();
    let reports = run_gradient_suite(7, 5).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(reports.len(), PRIMITIVES.len() * 5);
    for name in PRIMITIVES {
        let n = reports.iter().filter(|r| r.name.starts_with(&format!("{name} ("))).count();
        assert_eq!(n, 5, "{name}");
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(elapsed.as_secs() < 120, "{elapsed:?}");
}
