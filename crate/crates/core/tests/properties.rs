use aigc_alloc::baselines::{default_r_levels, greedy_allocate, oracle_grid_search, random_policy};
use aigc_alloc::diffusion::{decode_decision, DiffusionActor, NoiseSchedule, SampleMode};
use aigc_alloc::nn::{Activation, Mlp, Tensor};
use aigc_alloc::rng::substream;
use aigc_alloc::trainer::{realize, ReplayBuffer, Transition};
use aigc_alloc::{sample_scenario, Decision, ModelConstants, SamplerConfig, Scenario, R_MIN};
use proptest::prelude::*;

fn family_scenario(n: usize, seed: u64) -> Scenario {
    sample_scenario(&mut substream(seed, 0), &SamplerConfig::family(n)).unwrap()
}

fn decision_strategy(n: usize, t_max: u32) -> impl Strategy<Value = Decision> {
    (
        prop::collection::vec(R_MIN..=1.0f64, n),
        prop::collection::vec(1..=t_max, n),
    )
        .prop_map(|(resolution_ratio, diffusion_step)| Decision {
            resolution_ratio,
            diffusion_step,
        })
}

fn scenario_and_decision() -> impl Strategy<Value = (Scenario, Decision)> {
    (1usize..=6, any::<u64>()).prop_flat_map(|(n, seed)| {
        let s = family_scenario(n, seed);
        let t_max = s.max_diffusion_step;
        (Just(s), decision_strategy(n, t_max))
    })
}

proptest! {
    #[test]
    fn user_qoe_is_monotone(seed in any::<u64>(), r in R_MIN..1.0f64, dr in 0.0..0.5f64, d in 1u32..10) {
        let s = family_scenario(1, seed);
        let r2 = (r + dr).min(1.0);
        let base = s.user_qoe(r, d).unwrap();
        prop_assert!(s.user_qoe(r2, d).unwrap() >= base);
        prop_assert!(s.user_qoe(r, d + 1).unwrap() >= base);
    }

    #[test]
    fn projection_is_budget_feasible((s, x) in scenario_and_decision()) {
        let p = s.project_feasible(&x).unwrap();
        let rep = s.evaluate(&p).unwrap();
        prop_assert!(rep.bandwidth_feasible && rep.compute_feasible);
        for (r, d) in p.resolution_ratio.iter().zip(&p.diffusion_step) {
            prop_assert!((R_MIN..=1.0).contains(r));
            prop_assert!((1..=s.max_diffusion_step).contains(d));
        }
    }

    #[test]
    fn reward_equals_qoe_when_all_constraints_hold((s, x) in scenario_and_decision()) {
        let rep = s.evaluate(&x).unwrap();
        if rep.all_constraints_met() {
            prop_assert_eq!(rep.reward, rep.total_qoe);
            prop_assert_eq!(rep.penalty, 0.0);
        } else {
            prop_assert!(rep.reward < rep.total_qoe);
        }
    }

    #[test]
    fn evaluation_is_pure((s, x) in scenario_and_decision()) {
        prop_assert_eq!(s.evaluate(&x).unwrap(), s.evaluate(&x).unwrap());
        prop_assert_eq!(s.project_feasible(&x).unwrap(), s.project_feasible(&x).unwrap());
    }

    #[test]
    fn encoding_separates_every_field(seed in any::<u64>(), n in 1usize..=6, field in 0usize..8, delta in 1e-6..0.1f64) {
        let s = family_scenario(n, seed);
        let enc = SamplerConfig::family(n).encoder();
        let mut t = s.clone();
        match field % (2 + n) {
            0 => t.bandwidth_budget += delta,
            1 => t.compute_budget += delta,
            i => t.qoe_threshold[i - 2] += delta,
        }
        prop_assert_ne!(enc.encode(&s), enc.encode(&t));
    }

    #[test]
    fn decode_is_always_in_bounds(seed in any::<u64>(), n in 1usize..=6, raw in prop::collection::vec(-1e300..1e300f64, 12)) {
        let s = family_scenario(n, seed);
        let d = decode_decision(&raw[..2 * n], &s).unwrap();
        prop_assert_eq!(d.num_users(), n);
        prop_assert!(d.resolution_ratio.iter().all(|r| (R_MIN..=1.0).contains(r)));
        prop_assert!(d.diffusion_step.iter().all(|k| (1..=s.max_diffusion_step).contains(k)));
        let rep = realize(&raw[..2 * n], &s).unwrap();
        prop_assert!(rep.resource_feasible());
    }

    #[test]
    fn heuristics_are_feasible(seed in any::<u64>(), n in 1usize..=6) {
        let s = family_scenario(n, seed);
        let g = s.evaluate(&greedy_allocate(&s).unwrap()).unwrap();
        let r = s.evaluate(&random_policy(&s, &mut substream(seed, 6)).unwrap()).unwrap();
        prop_assert!(g.resource_feasible() && r.resource_feasible());
    }

    #[test]
    fn replay_never_exceeds_capacity(capacity in 1usize..50, pushes in 0usize..200) {
        let mut buf = ReplayBuffer::new(capacity).unwrap();
        for i in 0..pushes {
            buf.push(Transition { state: vec![i as f64], action: vec![0.0], reward: i as f64 });
            prop_assert!(buf.len() <= capacity);
        }
        let kept: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        let first = pushes.saturating_sub(capacity);
        let expected: Vec<f64> = (first..pushes).map(|i| i as f64).collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn forward_is_batch_consistent_and_finite(seed in any::<u64>(), rows in prop::collection::vec(prop::collection::vec(-1e6..1e6f64, 3), 1..6)) {
        let net = Mlp::new(&[3, 8, 2], Activation::Tanh, Activation::Identity, &mut substream(seed, 1)).unwrap();
        let batch = net.forward(&Tensor::from_rows(&rows).unwrap()).unwrap();
        prop_assert!(batch.is_finite());
        for (i, row) in rows.iter().enumerate() {
            let single = net.forward(&Tensor::row_vector(row.clone())).unwrap();
            prop_assert_eq!(single.data(), batch.row(i));
        }
    }

    #[test]
    fn deterministic_sampling_is_pure(seed in any::<u64>(), state in prop::collection::vec(-1.0..1.0f64, 4)) {
        let actor = DiffusionActor::new(
            4, 4, &[8], Activation::Tanh,
            NoiseSchedule::new(5, 1e-4, 0.1).unwrap(),
            &mut substream(seed, 1),
        ).unwrap();
        let states = Tensor::row_vector(state);
        let a = actor.sample_action(&states, &mut substream(seed, 3), SampleMode::Deterministic).unwrap();
        let b = actor.sample_action(&states, &mut substream(seed, 3), SampleMode::Deterministic).unwrap();
        prop_assert_eq!(a.data(), b.data());
        prop_assert!(a.data().iter().all(|x| x.abs() <= 3.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn oracle_dominates_every_grid_point(seed in any::<u64>(), picks in prop::collection::vec((0usize..10, 1u32..=10), 2)) {
        let s = family_scenario(2, seed);
        let levels = default_r_levels();
        let best = oracle_grid_search(&s, &levels).unwrap();
        let x = Decision {
            resolution_ratio: picks.iter().map(|(i, _)| levels[*i]).collect(),
            diffusion_step: picks.iter().map(|(_, d)| *d).collect(),
        };
        prop_assert!(s.evaluate(&x).unwrap().reward <= best.reward + 1e-12);
    }
}

#[test]
fn unconstrained_single_user_caps_at_one() {
    let s = Scenario::new(1e6, 1e6, vec![0.0], &ModelConstants::default()).unwrap();
    let best = oracle_grid_search(&s, &default_r_levels()).unwrap();
    assert!((best.reward - 1.0).abs() < 1e-12);
    for r in [R_MIN, 0.5, 1.0] {
        for d in 1..=s.max_diffusion_step {
            assert!(s.user_qoe(r, d).unwrap() <= 1.0 + 1e-12);
        }
    }
}
