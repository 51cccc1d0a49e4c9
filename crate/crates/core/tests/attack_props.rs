use fairbat::attack::{
    attack_trace, boundary_search_batch, pgd, project_linf, AttackConfig, AttackLoss, NoiseKey, StepRule,
};
use fairbat::data::Batch;
use fairbat::model::{init_model, Model, ModelSpec};
use fairbat::Tensor;
use proptest::prelude::*;

fn loss_kind() -> impl Strategy<Value = AttackLoss> {
    prop_oneof![Just(AttackLoss::CrossEntropy), Just(AttackLoss::KlToClean)]
}

fn step_rule() -> impl Strategy<Value = StepRule> {
    prop_oneof![Just(StepRule::Sign), Just(StepRule::Raw)]
}

prop_compose! {
    fn config()(
        eps in 0.0f32..0.3,
        step_frac in 0.05f32..1.0,
        max_steps in 0usize..12,
        xi_frac in 0.0f32..1.0,
        loss_kind in loss_kind(),
        step_rule in step_rule(),
    ) -> AttackConfig {
        AttackConfig {
            eps,
            step_size: (eps * step_frac).max(1e-3),
            max_steps,
            random_start_scale: eps * xi_frac * 0.1,
            loss_kind,
            step_rule,
        }
    }
}

prop_compose! {
    fn case()(
        dim in 1usize..5,
        k in 2usize..5,
        hidden in 0usize..8,
        model_seed in any::<u64>(),
        rows in 1usize..5,
    )(
        x in prop::collection::vec(0.0f32..=1.0, dim * rows),
        y in prop::collection::vec(0..k, rows),
        dim in Just(dim), k in Just(k), hidden in Just(hidden), model_seed in Just(model_seed),
    ) -> (Model, Batch) {
        let hidden: Vec<usize> = if hidden == 0 { vec![] } else { vec![hidden] };
        let m = init_model(&ModelSpec::mlp(dim, &hidden, k), model_seed).unwrap();
        let rows = y.len();
        let b = Batch { x: Tensor::new(vec![rows, dim], x).unwrap(), y, indices: (0..rows).collect() };
        (m, b)
    }
}

fn within_ball(out: &Tensor, x: &Tensor, eps: f32) -> bool {
    out.max_abs_diff(x) <= eps + 1e-6 && out.data().iter().all(|v| (0.0..=1.0).contains(v))
}

fn pred(m: &Model, x: &Tensor, row: usize) -> usize {
    m.predict(&x.select_rows(&[row]).unwrap()).unwrap()[0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pgd_stays_in_ball_and_domain((m, b) in case(), cfg in config(), seed in any::<u64>()) {
        let out = pgd(&m, &b, &cfg, NoiseKey::new(seed, 0)).unwrap();
        prop_assert!(within_ball(&out, &b.x, cfg.eps));
    }

    #[test]
    fn boundary_pairs_are_sound((m, b) in case(), cfg in config(), seed in any::<u64>()) {
        let bb = boundary_search_batch(&m, &b, &cfg, NoiseKey::new(seed, 3)).unwrap();
        prop_assert!(within_ball(&bb.x_clean_phi, &b.x, cfg.eps));
        prop_assert!(within_ball(&bb.x_adv_phi, &b.x, cfg.eps));
        for i in 0..b.len() {
            prop_assert!(bb.steps_used[i] <= cfg.max_steps);
            if bb.success[i] && bb.steps_used[i] >= 1 {
                prop_assert_eq!(pred(&m, &bb.x_clean_phi, i), b.y[i]);
                prop_assert_ne!(pred(&m, &bb.x_adv_phi, i), b.y[i]);
            }
            if bb.steps_used[i] == 0 {
                prop_assert_eq!(bb.x_clean_phi.row(i), b.x.row(i));
                prop_assert_eq!(bb.x_adv_phi.row(i), b.x.row(i));
            }
        }
    }

    #[test]
    fn boundary_search_is_batch_invariant((m, b) in case(), cfg in config(), seed in any::<u64>()) {
        let key = NoiseKey::new(seed, 1);
        let whole = boundary_search_batch(&m, &b, &cfg, key).unwrap();
        for i in 0..b.len() {
            let one = boundary_search_batch(&m, &b.select(&[i]).unwrap(), &cfg, key).unwrap();
            prop_assert_eq!(one.pair(0), whole.pair(i));
        }
    }

    #[test]
    fn trace_is_consistent((m, b) in case(), cfg in config(), seed in any::<u64>()) {
        let tr = attack_trace(&m, &b, &cfg, NoiseKey::new(seed, 0)).unwrap();
        prop_assert!(within_ball(&tr.x_final, &b.x, cfg.eps));
        for i in 0..b.len() {
            if tr.clean_pred[i] != b.y[i] {
                prop_assert_eq!(tr.first_failure[i], Some(0));
            }
            match tr.first_failure[i] {
                Some(t) => {
                    prop_assert!(t <= cfg.max_steps);
                    prop_assert_ne!(tr.failure_pred[i], b.y[i]);
                    prop_assert_eq!(pred(&m, &tr.x_final, i), tr.failure_pred[i]);
                }
                None => prop_assert_eq!(pred(&m, &tr.x_final, i), b.y[i]),
            }
        }
    }

    #[test]
    fn projection_is_idempotent_and_bounded(
        pairs in prop::collection::vec((-0.5f32..1.5, 0.0f32..=1.0), 1..16),
        eps in 0.0f32..0.5,
    ) {
        let n = pairs.len();
        let xt = Tensor::new(vec![n], pairs.iter().map(|p| p.0).collect()).unwrap();
        let x = Tensor::new(vec![n], pairs.iter().map(|p| p.1).collect()).unwrap();
        let once = project_linf(&xt, &x, eps).unwrap();
        prop_assert!(within_ball(&once, &x, eps));
        prop_assert_eq!(project_linf(&once, &x, eps).unwrap(), once);
    }
}
