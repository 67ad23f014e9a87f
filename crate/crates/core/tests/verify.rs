use std::time::Instant;

use isg_core::verify::{gradient_suite, COMPOSITE_TOLERANCE, OP_TOLERANCE};

#[test]
fn every_check_passes_within_budget() {
    let start = Instant::now();
    let outcomes = gradient_suite(10).unwrap();
    let elapsed = start.elapsed();
    for o in &outcomes {
        assert_eq!(o.seeds, 10);
        assert!(o.passed(), "{}: {:e} vs {:e}", o.name, o.max_relative_error, o.tolerance);
    }
    let composites: Vec<_> = outcomes.iter().filter(|o| o.tolerance == COMPOSITE_TOLERANCE).map(|o| o.name).collect();
    assert_eq!(composites, ["fusion_block", "end_to_end"]);
    assert!(outcomes.iter().filter(|o| o.tolerance == OP_TOLERANCE).count() >= 25);
    assert!(elapsed.as_secs() < 120, "{elapsed:?}");
}
