use super::*;
use ndarray::Array2;
use rand::Rng;
use statrs::distribution::{Continuous, Normal};

fn small_config(hidden: usize) -> LearnerConfig {
    LearnerConfig {
        obs_dim: 6,
        hidden,
        ae_hidden: hidden + 1,
        latent: 3,
        embed_hidden: 4,
        embed_dim: 3,
        ..LearnerConfig::default()
    }
}

fn random_batch(n: usize, obs_dim: usize, rng: &mut impl Rng) -> Batch {
    Batch {
        obs: Array2::from_shape_simple_fn((n, obs_dim), || rng.random_range(-1.0..1.0)),
        actions: Array2::from_shape_simple_fn((n, 2), || rng.random_range(-1.0..1.0)),
        rewards: Array1::from_shape_simple_fn(n, || rng.random_range(-1.0..1.0)),
        dones: Array1::from_shape_fn(n, |i| (i % 3 == 0) as u8 as f64),
        next_obs: Array2::from_shape_simple_fn((n, obs_dim), || rng.random_range(-1.0..1.0)),
    }
}

/// Central finite differences of `loss` over every element of the network
/// selected by `pick`, compared tensor by tensor with `analytic`.
fn fd_errors(
    learner: &SacLearner,
    pick: fn(&mut SacLearner) -> &mut Mlp,
    analytic: &Mlp,
    loss: &dyn Fn(&SacLearner) -> f64,
) -> Vec<(String, f64)> {
    let h = 1e-6;
    let mut probe = learner.clone();
    let names: Vec<(String, usize)> = pick(&mut probe)
        .tensors()
        .iter()
        .map(|(n, _, d)| (n.clone(), d.len()))
        .collect();
    let mut out = Vec::new();
    for (ti, (name, len)) in names.into_iter().enumerate() {
        let mut numeric = vec![0.0; len];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = pick(&mut probe).tensors()[ti].2[k];
            pick(&mut probe).tensors_mut()[ti][k] = orig + h;
            let up = loss(&probe);
            pick(&mut probe).tensors_mut()[ti][k] = orig - h;
            let down = loss(&probe);
            pick(&mut probe).tensors_mut()[ti][k] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let a = analytic.tensors()[ti].2;
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push((name, diff / na.max(nn).max(1e-8)));
    }
    out
}

fn assert_small(errors: &[(String, f64)], what: &str) {
    for (name, e) in errors {
        assert!(*e < 1e-3, "{what} {name}: relative error {e}");
    }
}

#[test]
fn critic_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &toggle in &[false, true] {
        let cfg = LearnerConfig {
            critic_grad_to_encoder: toggle,
            ..small_config(2)
        };
        let learner = SacLearner::new(cfg, 3).unwrap();
        let batch = random_batch(4, 6, &mut rng);
        let y = Array1::from_shape_simple_fn(4, || rng.random_range(-2.0..2.0));
        let (_, grads) = learner.critic_loss(&batch, &y);
        let loss = |l: &SacLearner| {
            let (v, _) = l.critic_loss(&batch, &y);
            v[0] + v[1]
        };
        assert_small(&fd_errors(&learner, |l| &mut l.critics[0], &grads.critics[0], &loss), "critic0");
        assert_small(&fd_errors(&learner, |l| &mut l.critics[1], &grads.critics[1], &loss), "critic1");
        assert_small(&fd_errors(&learner, |l| &mut l.embedder, &grads.embedder, &loss), "embedder");
        match grads.encoder {
            Some(g) => assert_small(&fd_errors(&learner, |l| &mut l.encoder, &g, &loss), "encoder"),
            None => assert!(!toggle),
        }
    }
}

#[test]
fn actor_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..3 {
        let learner = SacLearner::new(small_config(5), seed).unwrap();
        let batch = random_batch(4, 6, &mut rng);
        let eps = Array2::from_shape_simple_fn((4, 2), || StandardNormal.sample(&mut rng));
        let (_, grads, _) = learner.actor_loss(&batch.obs, &eps);
        let loss = |l: &SacLearner| l.actor_loss(&batch.obs, &eps).0;
        assert_small(&fd_errors(&learner, |l| &mut l.actor, &grads, &loss), "actor");
    }
}

#[test]
fn ae_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let learner = SacLearner::new(small_config(4), 9).unwrap();
    let batch = random_batch(4, 6, &mut rng);
    let (_, grads) = learner.ae_loss(&batch.obs);
    let loss = |l: &SacLearner| l.ae_loss(&batch.obs).0;
    assert_small(&fd_errors(&learner, |l| &mut l.encoder, &grads.encoder, &loss), "encoder");
    assert_small(&fd_errors(&learner, |l| &mut l.decoder, &grads.decoder, &loss), "decoder");
}

#[test]
fn alpha_gradient_matches_finite_difference_and_flips_sign() {
    let mut learner = SacLearner::new(small_config(3), 1).unwrap();
    let h = -learner.config().target_entropy;
    for &lp in &[h - 0.5, h + 0.5] {
        let log_prob = Array1::from_elem(4, lp);
        let (_, g) = learner.alpha_loss(&log_prob);
        let base = learner.log_alpha;
        learner.log_alpha = base + 1e-6;
        let up = learner.alpha_loss(&log_prob).0;
        learner.log_alpha = base - 1e-6;
        let down = learner.alpha_loss(&log_prob).0;
        learner.log_alpha = base;
        let num = (up - down) / 2e-6;
        assert!((g - num).abs() <= 1e-6 * num.abs().max(1.0));
        // Above -H the gradient is negative (alpha grows), below it is positive.
        if lp > h {
            assert!(g < 0.0);
        } else {
            assert!(g > 0.0);
        }
    }
}

#[test]
fn layer_normalized_head_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut head = Mlp::new(&[5, 16, 16, 1], true, &mut rng);
    let w = Array1::from_shape_simple_fn(16, || rng.random_range(-1.0..1.0));
    let w: Array1<f64> = &w / w.mapv(|v: f64| v * v).sum().sqrt();
    head.layers[2].w.row_mut(0).assign(&w);
    head.layers[2].b[0] = 0.0;
    assert!((q_bound(&head).unwrap() - 4.0).abs() < 1e-12);
    for _ in 0..2000 {
        let x = Array2::from_shape_simple_fn((1, 5), || rng.random_range(-50.0..50.0));
        let (q, feats) = q_with_features(&head, &x);
        assert!(q[0].abs() <= 4.0);
        assert!(q[0].abs() <= q_bound_at(&head, &feats.row(0).to_owned()) + 1e-12);
    }

    head.layers[2].w.fill(0.0);
    head.layers[2].b[0] = 0.5;
    let x = Array2::from_shape_simple_fn((3, 5), || rng.random_range(-5.0..5.0));
    assert!(head.forward(&x).iter().all(|&q| q == 0.5));
}

#[test]
fn twin_critics_differ() {
    let learner = SacLearner::new(small_config(8), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = Array2::from_shape_simple_fn((1, 3), || rng.random_range(-1.0..1.0));
    let a = Array2::from_shape_simple_fn((1, 2), || rng.random_range(-1.0..1.0));
    let q1 = learner.q_values(&learner.critics[0], &z, &a)[0];
    let q2 = learner.q_values(&learner.critics[1], &z, &a)[0];
    assert_ne!(q1, q2);
}

#[test]
fn collapsed_log_std_returns_mean_action() {
    let mut learner = SacLearner::new(LearnerConfig::default(), 2).unwrap();
    let last = learner.actor.layers.last_mut().unwrap();
    for r in 2..4 {
        last.w.row_mut(r).fill(0.0);
        last.b[r] = -20.0;
    }
    let obs = Observation(vec![0.3; crate::env::OBS_DIM]);
    let mean = learner.act(&obs, true);
    for _ in 0..100 {
        let a = learner.act(&obs, false);
        // exp(-5) * |eps| stays below the tolerance for typical draws.
        assert!((a.delta - mean.delta).abs() < 0.01 * 0.6 * 5.0);
        assert!((a.v - mean.v).abs() < 0.01 * 1.5 * 5.0);
    }
    let x = Array2::from_shape_vec((1, obs.0.len()), obs.0.clone()).unwrap();
    let p = learner.policy_sample(&x, &Array2::from_elem((1, 2), 1.0));
    assert!(p.log_std.iter().all(|&s| s == -5.0));
    assert!((&p.u - &p.mean).iter().all(|d| d.abs() < 0.01));
}

#[test]
fn log_prob_matches_change_of_variables() {
    let mut learner = SacLearner::new(LearnerConfig::default(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scale = learner.config().action_scale;
    for _ in 0..100 {
        let obs = Array2::from_shape_simple_fn((1, crate::env::OBS_DIM), || rng.random_range(-1.0..1.0));
        let eps = Array2::from_shape_simple_fn((1, 2), || StandardNormal.sample(&mut rng));
        let p = learner.policy_sample(&obs, &eps);
        let mut expected = 0.0;
        for (j, s) in scale.iter().enumerate() {
            let (mu, sigma, u) = (p.mean[[0, j]], p.log_std[[0, j]].exp(), p.u[[0, j]]);
            let gauss = Normal::new(mu, sigma).unwrap().ln_pdf(u);
            // d a / d u = scale * (1 - tanh(u)^2)
            let jac = s * (1.0 - u.tanh().powi(2));
            expected += gauss - jac.ln();
        }
        assert!((p.log_prob[0] - expected).abs() < 1e-4, "{} vs {expected}", p.log_prob[0]);
    }
    // The density of the squashed variable integrates to one.
    let (mu, log_std, b) = (0.4, -0.3f64, 1.5);
    let n = 200_000;
    let mut total = 0.0;
    for k in 0..n {
        let a = -b + (k as f64 + 0.5) * 2.0 * b / n as f64;
        let u = (a / b).atanh();
        let eps = (u - mu) / log_std.exp();
        total += squashed_log_prob(eps, log_std, u, b).exp() * 2.0 * b / n as f64;
    }
    assert!((total - 1.0).abs() < 1e-3, "{total}");
    let _ = learner.rng_mut();
}

#[test]
fn sampled_actions_respect_bounds() {
    let mut learner = SacLearner::new(small_config(8), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Push the mean far out so the squashing does the work.
    learner.actor.layers.last_mut().unwrap().b[0] = 40.0;
    for _ in 0..100_000 {
        let obs = Observation((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (a, lp) = learner.sample_action(&obs);
        assert!(a.delta.abs() <= 0.6 && a.v.abs() <= 1.5);
        assert!(!lp.is_nan());
    }
}

#[test]
fn ae_loss_matches_hand_computation() {
    let learner = SacLearner::new(small_config(4), 8).unwrap();
    let obs = Array2::from_shape_vec(
        (3, 6),
        vec![
            0.1, -0.2, 0.3, 0.0, 1.0, -1.0, //
            0.5, 0.5, -0.5, 0.2, 0.0, 0.9, //
            -0.7, 0.0, 0.4, 0.8, -0.3, 0.1,
        ],
    )
    .unwrap();
    let rec = learner.decode(&learner.encode(&obs));
    assert_eq!(rec.dim(), (3, 6));
    let mut expected = 0.0;
    for i in 0..3 {
        let row: f64 = (0..6).map(|j| (obs[[i, j]] - rec[[i, j]]).abs()).sum();
        expected += row;
    }
    expected /= 3.0;
    assert!((learner.ae_loss(&obs).0 - expected).abs() < 1e-12);
}

#[test]
fn ae_overfits_fixed_batch() {
    let mut learner = SacLearner::new(small_config(16), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = random_batch(8, 6, &mut rng);
    let before = learner.ae_loss(&batch.obs).0;
    for _ in 0..200 {
        assert!(!learner.update(&batch).aborted);
    }
    let after = learner.ae_loss(&batch.obs).0;
    assert!(after < 0.9 * before, "{before} -> {after}");
}

#[test]
fn target_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut learner = SacLearner::new(small_config(4), 10).unwrap();
    let mut batch = random_batch(3, 6, &mut rng);
    batch.dones.fill(1.0);
    batch.rewards.fill(5.0);
    let eps = Array2::from_shape_simple_fn((3, 2), || StandardNormal.sample(&mut rng));
    assert!(learner.compute_targets(&batch, &eps).iter().all(|&y| y == 5.0));

    batch.dones.fill(0.0);
    for (t, q) in learner.targets.iter_mut().zip([2.0, 3.0]) {
        let last = t.layers.last_mut().unwrap();
        last.w.fill(0.0);
        last.b[0] = q;
    }
    learner.log_alpha = f64::NEG_INFINITY;
    let y = learner.compute_targets(&batch, &eps);
    assert!(y.iter().all(|&v| (v - (5.0 + 0.99 * 2.0)).abs() < 1e-12));

    learner.targets[1] = learner.targets[0].clone();
    let y = learner.compute_targets(&batch, &eps);
    assert!(y.iter().all(|&v| (v - (5.0 + 0.99 * 2.0)).abs() < 1e-12));
}

#[test]
fn embedder_properties() {
    let learner = SacLearner::new(LearnerConfig::default(), 12).unwrap();
    let a = Array2::from_shape_vec((2, 2), vec![1.0, 1.0, -1.0, -1.0]).unwrap();
    let z1 = learner.embed(&a);
    let z2 = learner.embed(&a);
    assert_eq!(z1, z2);
    assert_eq!(z1.ncols(), 32);
    assert!(z1.row(0) != z1.row(1));
}

#[test]
fn polyak_contracts_toward_frozen_critics() {
    let mut learner = SacLearner::new(small_config(6), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for t in learner.targets[0].tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-1.0..1.0);
        }
    }
    let dist = |l: &SacLearner| {
        let t = l.targets[0].tensors();
        let c = l.critics[0].tensors();
        t.iter()
            .zip(c.iter())
            .flat_map(|(a, b)| a.2.iter().zip(b.2.iter()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    };
    let before = dist(&learner);
    learner.soft_update_targets();
    let after = dist(&learner);
    assert!((after / before - 0.995).abs() < 1e-12);

    let mut fresh = SacLearner::new(small_config(6), 14).unwrap();
    for _ in 0..1000 {
        fresh.soft_update_targets();
    }
    assert_eq!(fresh.targets[0], fresh.critics[0]);
    assert_eq!(fresh.targets[1], fresh.critics[1]);
}

#[test]
fn params_roundtrip_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut learner = SacLearner::new(small_config(8), 15).unwrap();
    let batch = random_batch(8, 6, &mut rng);
    for _ in 0..5 {
        learner.update(&batch);
    }
    let bytes = learner.params_to_bytes();
    let mut other = SacLearner::new(small_config(8), 99).unwrap();
    other.load_params_bytes(&bytes).unwrap();
    assert_eq!(other.params_to_bytes(), bytes);
    assert_eq!(other.opt, learner.opt);
    for _ in 0..100 {
        let x = Array2::from_shape_simple_fn((1, 6), || rng.random_range(-1.0..1.0));
        assert_eq!(other.actor.forward(&x), learner.actor.forward(&x));
        assert_eq!(other.encode(&x), learner.encode(&x));
    }
}

#[test]
fn corrupt_params_leave_state_untouched() {
    let learner = SacLearner::new(small_config(8), 16).unwrap();
    let bytes = learner.params_to_bytes();
    let mut other = SacLearner::new(small_config(8), 17).unwrap();
    let snapshot = other.params_to_bytes();
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(other.load_params_bytes(&bytes[..cut]).is_err());
        assert_eq!(other.params_to_bytes(), snapshot);
    }
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    assert!(matches!(
        other.load_params_bytes(&wrong_version),
        Err(LearnerError::Version { found: 9 })
    ));
    let mut bigger = SacLearner::new(small_config(9), 17).unwrap();
    assert!(matches!(bigger.load_params_bytes(&bytes), Err(LearnerError::Shape { .. })));
}

#[test]
fn same_seed_same_data_same_params() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut learner = SacLearner::new(small_config(8), 18).unwrap();
        for _ in 0..20 {
            let batch = random_batch(8, 6, &mut rng);
            learner.update(&batch);
        }
        learner.params_to_bytes()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_aborts_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut learner = SacLearner::new(small_config(8), 19).unwrap();
    let mut batch = random_batch(4, 6, &mut rng);
    batch.rewards[1] = f64::NAN;
    let before = learner.params_to_bytes();
    let report = learner.update(&batch);
    assert!(report.aborted);
    assert_eq!(learner.params_to_bytes(), before);
}

#[test]
fn temperature_stays_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut learner = SacLearner::new(small_config(8), 20).unwrap();
    let batch = random_batch(8, 6, &mut rng);
    for _ in 0..300 {
        let r = learner.update(&batch);
        assert!(r.alpha > 0.0);
    }
    assert!(learner.alpha() > 0.0 && learner.is_finite());
}
