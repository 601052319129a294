mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::{gradient_suite, GRAD_TOL, SHAPES_PER_OP};

#[test]
fn every_op_matches_central_differences() {
    let start = Instant::now();
    let checks = gradient_suite(0x5eed);
    let mut per_op: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &checks {
        assert!(c.result.max_rel_err <= GRAD_TOL, "{} {:?}: rel err {:e}", c.op, c.shape, c.result.max_rel_err);
        *per_op.entry(c.op).or_default() += 1;
    }
    assert!(per_op.values().all(|&n| n >= SHAPES_PER_OP), "{per_op:?}");
    assert!(start.elapsed().as_secs() < 60, "{:?}", start.elapsed());
}
