use aigc_alloc::diffusion::{
    actor_loss, decode_decision, evaluation_start, DiffusionActor, NoiseSchedule,
};
use aigc_alloc::nn::{Activation, Graph, Tensor};
use aigc_alloc::rng::{stream, substream};
use aigc_alloc::trainer::{
    eval_scenarios, evaluate_policy, train, CriticOptimizer, CriticPair, TrainConfig,
};
use aigc_alloc::SamplerConfig;

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        total_steps: 300,
        warmup_steps: 100,
        eval_every: 100,
        eval_episodes: 20,
        batch_size: 16,
        actor_hidden: vec![16],
        critic_hidden: vec![16],
        seed,
        sampler: SamplerConfig::family(2),
        ..TrainConfig::default()
    }
}

#[test]
fn actor_descends_to_the_origin_of_a_quadratic_critic() {
    // Q(s, a) = -|a|^2 with K = 1, so the actor loss is mean |a_0|^2.
    let mut rng = substream(11, 0);
    let mut actor = DiffusionActor::new(
        2,
        2,
        &[16],
        Activation::Tanh,
        NoiseSchedule::new(1, 0.05, 0.05).unwrap(),
        &mut rng,
    )
    .unwrap();
    let states = Tensor::from_rows(&[[0.1, 0.9], [0.5, 0.5], [0.8, 0.2], [0.3, 0.3]]).unwrap();
    let start = Tensor::from_rows(&[[1.0, -0.5], [-0.8, 0.6], [0.4, 1.2], [-1.1, -0.3]]).unwrap();
    let mut opt = actor.eps_net().adam(1e-2);
    let mut norm = f64::INFINITY;
    for _ in 0..500 {
        let mut g = Graph::new();
        let bound = actor.eps_net().bind(&mut g, true);
        let s = g.constant(states.clone());
        let a0 = actor
            .denoise_graph(&mut g, &bound, s, start.clone())
            .unwrap();
        let sq = g.square(a0);
        let per_row = g.sum_cols(sq);
        let loss = g.mean(per_row);
        let grads = g.backward(loss).unwrap();
        norm = g
            .value(per_row)
            .data()
            .iter()
            .map(|x| x.sqrt())
            .fold(0.0, f64::max);
        let grads = actor.eps_net().collect_grads(&grads, &bound);
        actor.eps_net_mut().apply_adam(&mut opt, &grads).unwrap();
    }
    assert!(norm < 0.1, "largest |a_0| after 500 steps: {norm}");
}

#[test]
fn constant_critics_give_zero_actor_gradient() {
    let mut rng = substream(12, 0);
    let actor = DiffusionActor::new(
        3,
        2,
        &[8],
        Activation::Tanh,
        NoiseSchedule::new(2, 0.1, 0.2).unwrap(),
        &mut rng,
    )
    .unwrap();
    let mut critics = CriticPair::new(5, &[8], Activation::Relu, 0.005, &mut rng).unwrap();
    for net in [&mut critics.q1, &mut critics.q2] {
        let last = net.num_layers() - 1;
        let mut params = net.params_mut();
        params[2 * last]
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        params[2 * last + 1].data_mut()[0] = 0.7;
    }
    let frozen = critics.clone();
    let states = Tensor::from_rows(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]).unwrap();
    let start = Tensor::from_rows(&[[0.3, -0.2], [1.0, 0.5]]).unwrap();
    let out = actor_loss(&actor, &critics, &states, start).unwrap();
    assert!((out.loss + 0.7).abs() < 1e-12);
    assert!(out.grads.iter().all(|g| g.data().iter().all(|x| *x == 0.0)));
    assert_eq!(critics, frozen);
}

fn regress(inputs: &Tensor, rewards: &Tensor, steps: usize) -> (CriticPair, Vec<f64>) {
    let mut critics = CriticPair::new(
        inputs.cols(),
        &[16, 16],
        Activation::Relu,
        0.005,
        &mut substream(13, 0),
    )
    .unwrap();
    let mut opt = CriticOptimizer::new(&critics, 1e-3);
    let losses = (0..steps)
        .map(|_| opt.step(&mut critics, inputs, rewards).unwrap())
        .collect();
    (critics, losses)
}

#[test]
fn critics_regress_to_a_constant_reward() {
    let rows: Vec<[f64; 4]> = (0..32)
        .map(|i| {
            let t = i as f64 / 32.0;
            [t, 1.0 - t, (3.0 * t).sin(), t * t]
        })
        .collect();
    let inputs = Tensor::from_rows(&rows).unwrap();
    let (critics, losses) = regress(&inputs, &Tensor::vector(vec![1.0; 32]), 3000);
    let q = critics.q_values(&inputs).unwrap().0;
    assert!(
        q.data().iter().all(|v| (0.99..=1.01).contains(v)),
        "{:?}",
        q.data()
    );

    // Full-batch regression on a frozen buffer: window means never rise.
    let windows: Vec<f64> = losses
        .chunks(100)
        .map(|w| w.iter().sum::<f64>() / 100.0)
        .collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0], "window loss rose: {pair:?}");
    }
}

#[test]
fn critics_regress_to_the_mean_of_conflicting_rewards() {
    let inputs = Tensor::from_rows(&[[0.2, 0.4, 0.6], [0.2, 0.4, 0.6]]).unwrap();
    let (critics, _) = regress(&inputs, &Tensor::vector(vec![0.0, 1.0]), 3000);
    let (q1, q2) = critics.q_values(&inputs).unwrap();
    for v in q1.data().iter().chain(q2.data()) {
        assert!((v - 0.5).abs() <= 0.01, "prediction {v}");
    }
}

#[test]
fn soft_update_gap_decays_geometrically() {
    let mut critics =
        CriticPair::new(3, &[4], Activation::Relu, 0.005, &mut substream(14, 0)).unwrap();
    for p in critics.target1.params_mut() {
        p.data_mut().iter_mut().for_each(|x| *x += 1.0);
    }
    let gap = |c: &CriticPair| {
        c.q1.params()
            .iter()
            .zip(c.target1.params())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    };
    let before = gap(&critics);
    for _ in 0..1000 {
        critics.soft_update().unwrap();
    }
    let ratio = gap(&critics) / before;
    assert!((ratio - 0.995f64.powi(1000)).abs() < 1e-9, "ratio {ratio}");
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let a = train(&small_config(5)).unwrap();
    let b = train(&small_config(5)).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.actor, b.actor);
    assert_eq!(a.critics, b.critics);
    assert_eq!(a.curve.len(), 3);
}

#[test]
fn warmup_only_run_keeps_the_initial_policy() {
    let cfg = TrainConfig {
        total_steps: 100,
        ..small_config(6)
    };
    let out = train(&cfg).unwrap();
    let encoder = cfg.encoder();
    let fresh = DiffusionActor::new(
        encoder.dim(),
        cfg.action_dim(),
        &cfg.actor_hidden,
        cfg.actor_activation,
        NoiseSchedule::new(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end).unwrap(),
        &mut substream(cfg.seed, stream::INIT),
    )
    .unwrap();
    assert_eq!(out.actor, fresh);
    let eval = evaluate_policy(&fresh, &eval_scenarios(&cfg).unwrap(), &encoder).unwrap();
    assert_eq!(out.curve.final_reward(), Some(eval.mean_reward));
}

#[test]
fn repeated_scenario_evaluates_identically() {
    let cfg = small_config(7);
    let s = eval_scenarios(&cfg).unwrap()[0].clone();
    let actor = train(&TrainConfig {
        total_steps: 0,
        ..cfg.clone()
    })
    .unwrap()
    .actor;
    let eval = evaluate_policy(&actor, &vec![s; 40], &cfg.encoder()).unwrap();
    assert!(eval.reports.iter().all(|r| r == &eval.reports[0]));
}

#[test]
fn zero_predictor_matches_direct_decoding() {
    let cfg = small_config(8);
    let encoder = cfg.encoder();
    let schedule = NoiseSchedule::new(5, 1e-4, 0.1).unwrap();
    let ab = schedule.alpha_bar(5);
    let mut actor = DiffusionActor::new(
        encoder.dim(),
        cfg.action_dim(),
        &[8],
        Activation::Tanh,
        schedule,
        &mut substream(0, 0),
    )
    .unwrap();
    for p in actor.eps_net_mut().params_mut() {
        p.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let scenarios = eval_scenarios(&cfg).unwrap();
    let eval = evaluate_policy(&actor, &scenarios, &encoder).unwrap();
    let direct: f64 = scenarios
        .iter()
        .map(|s| {
            let raw: Vec<f64> = evaluation_start(&encoder.encode(s), cfg.action_dim())
                .iter()
                .map(|x| (x / ab.sqrt()).clamp(-3.0, 3.0))
                .collect();
            let x = s
                .project_feasible(&decode_decision(&raw, s).unwrap())
                .unwrap();
            s.evaluate(&x).unwrap().reward
        })
        .sum::<f64>()
        / scenarios.len() as f64;
    assert!((eval.mean_reward - direct).abs() < 1e-12);
}
