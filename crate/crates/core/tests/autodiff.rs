use fsgpt::gradcheck::{check_joint_loss, check_mstm_loss, check_ops, check_params, tiny_setup, worst, CheckResult};
use fsgpt::tensor::{Graph, Tensor};
use proptest::prelude::*;

const TOL: f64 = 1e-4;

fn report(results: &[CheckResult]) {
    let bad: Vec<_> = results.iter().filter(|r| !r.passes(TOL)).collect();
    assert!(bad.is_empty(), "gradient mismatches: {bad:#?}");
}

#[test]
fn every_op_matches_central_differences() {
    let results = check_ops(7).unwrap();
    assert!(results.len() >= 20);
    report(&results);
}

#[test]
fn joint_loss_gradients_through_full_model() {
    let results = check_joint_loss(3).unwrap();
    // Backbone, prompts, task token and both heads are all exercised.
    for prefix in ["model.pos", "head.bp", "head.ad", "pool.prompt.", "pool.task."] {
        assert!(results.iter().any(|r| r.name.starts_with(prefix)), "no check for {prefix}");
    }
    report(&results);
    println!("joint loss worst: {:?}", worst(&results).unwrap());
}

#[test]
fn mstm_loss_gradients_through_full_model() {
    let results = check_mstm_loss(5).unwrap();
    report(&results);
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut s = tiny_setup(1).unwrap();
    s.store.set_trainable(|n| n.starts_with("head."));
    let results = check_params(&s.store, |st| {
        let (l, g) = fsgpt::pretrain::window_loss(
            st,
            &s.window,
            &fsgpt::pretrain::MaskPlan::from_keep(3, 4, vec![true, false, true, true, true, true, true, true, true, true, true, false]).unwrap(),
            &s.model,
            None,
            true,
        )?;
        assert!(g.iter().all(|(n, _)| n.starts_with("head.")));
        Ok((l, g))
    });
    // The numeric gradient of frozen parameters is nonzero, so the check must
    // flag them: freezing really cuts them out of the backward pass.
    let results = results.unwrap();
    assert!(results.iter().any(|r| !r.name.starts_with("head.") && !r.passes(TOL)));
    assert!(results.iter().filter(|r| r.name.starts_with("head.recon")).all(|r| r.passes(TOL)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn op_suite_holds_for_random_inputs(seed in 0u64..10_000) {
        for r in check_ops(seed).unwrap() {
            prop_assert!(r.passes(TOL), "{r:?}");
        }
    }

    #[test]
    fn matmul_chain_rule(a in prop::collection::vec(-2.0f64..2.0, 6), b in prop::collection::vec(-2.0f64..2.0, 6)) {
        // d/dA sum(A·B) = 1·Bᵀ row sums.
        let mut g = Graph::<f64>::new();
        let va = g.leaf(Tensor::new(vec![2, 3], a).unwrap(), true);
        let vb = g.leaf(Tensor::new(vec![3, 2], b.clone()).unwrap(), true);
        let y = g.matmul(va, vb).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        let ga = grads.get(va).unwrap().data().to_vec();
        for i in 0..2 {
            for k in 0..3 {
                prop_assert!((ga[i * 3 + k] - (b[k * 2] + b[k * 2 + 1])).abs() < 1e-12);
            }
        }
    }
}
