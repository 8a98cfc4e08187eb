//! Finite-difference checks of every differentiable operation.

mod common;

use common::{check_op, op_cases, OP_SEEDS, OP_TOL};

#[test]
fn every_op_matches_finite_differences() {
    let cases = op_cases();
    assert!(cases.len() >= 20);
    for case in &cases {
        for seed in OP_SEEDS {
            let r = check_op(case, seed).unwrap();
            assert!(
                r.max_rel_err <= OP_TOL,
                "{} seed {seed}: rel err {:.3e} at {:?}",
                case.name,
                r.max_rel_err,
                r.worst
            );
        }
    }
}

#[test]
fn model_gradient_matches_on_a_small_sample() {
    let check = mtlseg::gradcheck::ModelCheck {
        per_param: 2,
        ..Default::default()
    };
    let (r, names) = mtlseg::gradcheck::model_grad_check(4, check).unwrap();
    let worst = r.worst.map(|w| names[w.0].clone());
    assert!(r.max_rel_err <= 1e-4, "{:.3e} at {worst:?}", r.max_rel_err);
}
