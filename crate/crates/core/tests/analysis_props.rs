use fairbat::analysis::{avg_attack_steps, avg_steps_from_trace};
use fairbat::attack::{AttackConfig, AttackLoss, StepRule};
use fairbat::data::{gen_mixture, Dataset, MixtureSpec};
use fairbat::model::{init_model, Model, ModelSpec};
use fairbat::{
    class_errors, confusion_matrix, fairness_report, spearman, trace_dataset, ClassErrors, ConfusionMatrix,
    EvalOptions, TargetDistribution, Tensor,
};
use proptest::prelude::*;

fn eval_attack(eps: f32, steps: usize) -> AttackConfig {
    AttackConfig {
        eps,
        step_size: eps / 4.0,
        max_steps: steps,
        random_start_scale: 0.0,
        loss_kind: AttackLoss::CrossEntropy,
        step_rule: StepRule::Sign,
    }
}

fn opts(threads: usize, batch_size: usize) -> EvalOptions {
    EvalOptions {
        threads,
        batch_size,
        seed: 5,
    }
}

fn stress(count: usize, seed: u64) -> Dataset {
    gen_mixture(&MixtureSpec::fairness_stress(count), seed).unwrap()
}

prop_compose! {
    fn rates(k: usize)(pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), k)) -> (Vec<f64>, Vec<f64>) {
        let std = pairs.iter().map(|p| p.0.min(p.1)).collect();
        let rob = pairs.iter().map(|p| p.0.max(p.1)).collect();
        (std, rob)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn report_identities_hold((std, rob) in (2usize..12).prop_flat_map(rates)) {
        let k = std.len();
        let errors = ClassErrors::from_rates(std.clone(), rob.clone(), vec![10; k]).unwrap();
        let r = fairness_report(errors, None).unwrap();
        prop_assert!((r.avg_rob - r.avg_std - r.avg_bndy).abs() <= 1e-12);
        for c in 0..k {
            prop_assert!((r.per_class.rob_err[c] - r.per_class.std_err[c] - r.per_class.bndy_err[c]).abs() <= 1e-12);
            prop_assert!(r.per_class.bndy_err[c] >= 0.0);
        }
        let max = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(r.worst_std, max(&std));
        prop_assert_eq!(r.worst_rob, max(&rob));
        prop_assert!(r.worst_rob >= r.avg_rob && r.worst_std >= r.avg_std && r.worst_bndy >= r.avg_bndy);
        prop_assert!(r.worst_rob <= r.worst_std + r.worst_bndy + 1e-12);
    }

    #[test]
    fn target_distribution_is_normalised(counts in prop::collection::vec(0usize..50, 2..12)) {
        prop_assume!(counts.iter().sum::<usize>() > 0);
        let t = TargetDistribution::from_counts(counts.clone()).unwrap();
        prop_assert!((t.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(t.kl_to_uniform >= -1e-12);
        prop_assert!(t.kl_to_uniform <= (counts.len() as f64).ln() + 1e-12);
        prop_assert_eq!(t.successes(), counts.iter().sum::<usize>());
    }

    #[test]
    fn spearman_is_rank_based(
        xs in prop::collection::vec(-100.0f64..100.0, 3..20),
        noise in prop::collection::vec(-1.0f64..1.0, 20),
    ) {
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| x * 0.5 + n * 30.0).collect();
        let (Ok(rho), true) = (spearman(&xs, &ys), xs.len() >= 3) else { return Ok(()); };
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
        let warped: Vec<f64> = xs.iter().map(|x| x.powi(3) + 7.0).collect();
        prop_assert!((spearman(&warped, &ys).unwrap() - rho).abs() <= 1e-12);
        let neg: Vec<f64> = ys.iter().map(|y| -y).collect();
        prop_assert!((spearman(&xs, &neg).unwrap() + rho).abs() <= 1e-12);
        prop_assert!((spearman(&ys, &xs).unwrap() - rho).abs() <= 1e-12);
    }
}

fn random_model(seed: u64) -> Model {
    init_model(&ModelSpec::mlp(2, &[8], 5), seed).unwrap()
}

#[test]
fn tables_do_not_depend_on_threads_or_shards() {
    let ds = stress(23, 4);
    for seed in 0..4 {
        let m = random_model(seed);
        let cfg = AttackConfig {
            random_start_scale: 0.01,
            ..eval_attack(0.1, 7)
        };
        let reference = trace_dataset(&m, &ds, &cfg, &opts(1, 1000)).unwrap();
        for (threads, shard) in [(1, 7), (4, 7), (3, 1), (8, 50)] {
            assert_eq!(trace_dataset(&m, &ds, &cfg, &opts(threads, shard)).unwrap(), reference);
        }
    }
}

#[test]
fn confusion_matrices_are_consistent_with_the_trace() {
    let ds = stress(17, 8);
    for seed in 0..4 {
        let m = random_model(seed);
        let cfg = eval_attack(0.1, 6);
        let trace = trace_dataset(&m, &ds, &cfg, &opts(2, 16)).unwrap();
        let counts: Vec<u64> = ds.class_counts().iter().map(|&c| c as u64).collect();
        let mut prev_diag = u64::MAX;
        for step in 0..=cfg.max_steps {
            let cm = ConfusionMatrix::from_trace(&trace, Some(step)).unwrap();
            assert_eq!(cm.row_sums(), counts);
            assert_eq!(cm.total(), ds.len() as u64);
            assert!(cm.trace() <= prev_diag);
            prev_diag = cm.trace();
            if step == 0 {
                let clean = (0..trace.len()).filter(|&i| trace.clean_correct(i)).count();
                assert_eq!(cm.trace(), clean as u64);
            }
        }
        let last = confusion_matrix(&m, &ds, &cfg, None, &opts(2, 16)).unwrap();
        let robust = (0..trace.len()).filter(|&i| trace.robust(i)).count();
        assert_eq!(last.trace(), robust as u64);
        let off: u64 = (0..5).map(|c| last.row_sums()[c] - last.counts[c][c]).sum();
        let t = TargetDistribution::from_confusion(&last).unwrap();
        assert_eq!(t.successes() as u64, off);
        assert!(ConfusionMatrix::from_trace(&trace, Some(cfg.max_steps + 1)).is_err());
    }
}

#[test]
fn class_errors_match_a_direct_count() {
    let ds = stress(19, 2);
    let m = random_model(3);
    let cfg = eval_attack(0.08, 5);
    let e = class_errors(&m, &ds, &cfg, &opts(2, 13)).unwrap();
    let trace = trace_dataset(&m, &ds, &cfg, &opts(1, 64)).unwrap();
    let clean = m.predict(ds.features()).unwrap();
    for c in 0..5 {
        let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == c).collect();
        let n = rows.len() as f64;
        let std = rows.iter().filter(|&&i| clean[i] != c).count() as f64 / n;
        let rob = rows.iter().filter(|&&i| !trace.robust(i)).count() as f64 / n;
        assert_eq!(e.std_err[c], std);
        assert_eq!(e.rob_err[c], rob);
        assert_eq!(e.counts[c], rows.len());
    }
}

/// A one-dimensional linear model with decision threshold 0.5 and a sign
/// attack of step 0.1: a class-0 point at `x < 0.5` needs
/// `ceil((0.5 - x) / 0.1)` steps to cross, a class-1 point at `x > 0.5`
/// needs `ceil((x - 0.5) / 0.1)`.
#[test]
fn avg_attack_steps_on_a_hand_built_margin() {
    let mut m = init_model(&ModelSpec::mlp(1, &[], 2), 0).unwrap();
    m.param_mut("fc1.weight").unwrap().value.data_mut().copy_from_slice(&[0.0, 4.0]);
    m.param_mut("fc1.bias").unwrap().value.data_mut().copy_from_slice(&[0.0, -2.0]);
    let xs = [0.42, 0.27, 0.05, 0.7, 0.66, 0.93];
    let ys = vec![0, 0, 0, 0, 1, 1];
    let ds = Dataset::new(Tensor::new(vec![6, 1], xs.to_vec()).unwrap(), ys, 2).unwrap();
    let longrun = AttackConfig {
        eps: 1.0,
        step_size: 0.1,
        max_steps: 20,
        random_start_scale: 0.0,
        loss_kind: AttackLoss::CrossEntropy,
        step_rule: StepRule::Sign,
    };
    let expected = [(1.0 + 3.0 + 5.0 + 0.0) / 4.0, (2.0 + 5.0) / 2.0];
    let got = avg_attack_steps(&m, &ds, &longrun, &opts(1, 2)).unwrap();
    assert_eq!(got, expected);
    let trace = trace_dataset(&m, &ds, &longrun, &opts(2, 4)).unwrap();
    assert_eq!(avg_steps_from_trace(&trace).unwrap(), expected);

    let capped = AttackConfig { max_steps: 3, ..longrun };
    let got = avg_attack_steps(&m, &ds, &capped, &opts(1, 6)).unwrap();
    assert_eq!(got, [(1.0 + 3.0 + 3.0 + 0.0) / 4.0, (2.0 + 3.0) / 2.0]);
}

#[test]
fn reports_from_a_filtered_dataset_carry_original_ids() {
    let ds = stress(10, 1);
    let sub = fairbat::filter_classes(&ds, &[0, 3].into_iter().collect()).unwrap();
    let m = init_model(&ModelSpec::mlp(2, &[4], 3), 0).unwrap();
    let e = class_errors(&m, &sub, &eval_attack(0.05, 3), &opts(1, 8)).unwrap();
    let r = fairness_report(e, None).unwrap().with_class_map(sub.class_map());
    assert_eq!(r.original_class.as_deref(), Some(&[1, 2, 4][..]));
    let csv = r.to_csv();
    let ids: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["1", "2", "4", "AVG", "WORST"]);
}
