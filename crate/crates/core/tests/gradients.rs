mod common;

use autoprompt::decoder::{Combine, SkipMode};
use autoprompt::gradcheck::DEFAULT_TOL;

#[test]
fn every_primitive_kind_passes() {
    for i in 0..40 {
        let (name, r) = common::primitive_case(i, 77 + i as u64).unwrap();
        assert!(r.passed(DEFAULT_TOL), "{name}: {r:?}");
    }
}

#[test]
fn decoder_and_head_compose() {
    for (i, skip) in [SkipMode::Chained, SkipMode::Direct, SkipMode::None].into_iter().enumerate() {
        let (name, r) = common::composed_case(Combine::Concat, skip, 500 + i as u64).unwrap();
        assert!(r.passed(DEFAULT_TOL), "{name}: {r:?}");
        assert!(r.checked > 100, "{name}: only {} coordinates", r.checked);
    }
    let (name, r) = common::composed_case(Combine::Sum, SkipMode::Chained, 9).unwrap();
    assert!(r.passed(DEFAULT_TOL), "{name}: {r:?}");
}
