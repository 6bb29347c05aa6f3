use cpr::numerics::FdOptions;
use cpr::trainer::CheckProblem;

const EXPECTED_TENSORS: [&str; 2] = ["prompt.ctx", "coadapter.visual.norm.gamma"];

#[test]
fn every_trainable_tensor_passes_over_seeds() {
    for seed in 1..=20 {
        let report = CheckProblem {
            seed,
            ..CheckProblem::default()
        }
        .run(FdOptions::default())
        .unwrap();
        assert_eq!(report.tensors.len(), 1 + 2 * 13, "seed {seed}");
        for t in &report.tensors {
            assert!(t.passed, "seed {seed}: {} rel error {:e}", t.name, t.max_rel_error);
            assert!(t.max_abs_grad > 0.0, "seed {seed}: {} has a zero gradient", t.name);
        }
    }
}

#[test]
fn check_covers_prompt_context_and_both_branches() {
    let report = CheckProblem::default().run(FdOptions::default()).unwrap();
    let names: Vec<&str> = report.tensors.iter().map(|t| t.name.as_str()).collect();
    for want in EXPECTED_TENSORS {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    assert!(names.iter().any(|n| n.starts_with("coadapter.textual.")));
}

#[test]
fn nnr_inside_the_loss_is_differentiated_correctly() {
    let report = CheckProblem {
        nnr_in_loss: true,
        ..CheckProblem::default()
    }
    .run(FdOptions::default())
    .unwrap();
    assert!(report.passed(), "worst {:e}", report.worst());
}

#[test]
fn corrupted_gradient_is_caught() {
    use cpr::numerics::finite_diff_check;
    let problem = CheckProblem::default();
    let (model, data, cfg) = problem.build().unwrap();
    let report = cpr::trainer::check_gradients(&model, &data, &cfg, FdOptions::default()).unwrap();
    assert!(report.passed());

    // A constant loss has zero numeric gradient everywhere.
    let id = model.store.trainable_ids().next().unwrap();
    let mut grads = cpr::numerics::Gradients::zeros_like(&model.store);
    grads.get_mut(id).data_mut()[0] = 1.0;
    let bad = finite_diff_check(|_| Ok(0.0), &model.store, &grads, FdOptions::default()).unwrap();
    assert!(!bad.passed());
}
