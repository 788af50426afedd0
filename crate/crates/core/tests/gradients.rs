//! Central finite-difference validation of every differentiable building
//! block: the elementary tensor ops and the constraint groundings built on
//! top of them. Each suite case re-runs its target on freshly seeded random
//! inputs and compares analytic against numeric gradients coordinatewise.

use slseg_core::autodiff::{standard_suite, SuiteCase};
use slseg_core::constraints::grounding_suite;

const TOL: f64 = 1e-3;

fn assert_all_pass(cases: &[SuiteCase<f64>]) {
    for case in cases {
        assert!(
            case.checked > 0,
            "{}: no coordinates were checked",
            case.name
        );
        assert!(
            case.max_rel_err <= TOL,
            "{}: max relative error {:.3e} over {} coordinates ({} kinks skipped)",
            case.name,
            case.max_rel_err,
            case.checked,
            case.skipped_kinks
        );
    }
}

#[test]
fn elementary_ops_match_finite_differences() {
    let cases = standard_suite::<f64>(9, 0x0a11_d1ff).unwrap();
    assert!(cases.len() >= 10, "suite shrank to {} cases", cases.len());
    assert_all_pass(&cases);
}

#[test]
fn constraint_groundings_match_finite_differences() {
    // 6 groundings x 17 seeded rounds = 102 independent input draws.
    let cases = grounding_suite::<f64>(17, 0x6e65_7572).unwrap();
    assert_eq!(cases.len(), 6);
    assert_all_pass(&cases);
    let total: usize = cases.iter().map(|c| c.checked).sum();
    assert!(total >= 100, "only {total} coordinates checked");
}
