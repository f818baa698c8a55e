mod common;

use common::{random_matrix, random_net, rng};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use sns_core::estimator::HistoryWindow;
use sns_core::robust_loss::{
    cauchy_nll, cauchy_nll_grad_mu, denormalize_io, lower_median, mce, median_mad, normalize_io, LikelihoodKind,
};
use sns_core::sampling_baseline::{softmin_weights, SamplerConfig};
use sns_core::shooting_mpc::{
    relaxed_barrier, relaxed_barrier_derivative, relaxed_barrier_second, SplineControl, SplineKind,
};
use sns_core::smooth_net::{normalize_weights, Activation, InputBox, SmoothnessBudget, SmoothnessOrder};
use sns_core::tasks::{generate_particle_dataset, particle_step, Episode, ParticleConfig, ParticleState};
use sns_core::trainer::{build_models, ModelSpec, ModelStats, ReplayBuffer, TrainConfig};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 64,
        ..ProptestConfig::default()
    }
}

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    (1usize..4, prop::collection::vec(1usize..12, 1..4), 1usize..3).prop_map(|(i, mut h, o)| {
        h.insert(0, i);
        h.push(o);
        h
    })
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn normalized_rows_respect_budget(
        rows in 1usize..8,
        cols in 1usize..8,
        theta in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let w = random_matrix(rows, cols, -10.0, 10.0, &mut rng(seed));
        let wn = normalize_weights(w.view(), theta).unwrap();
        for (r, orig) in wn.rows().into_iter().zip(w.rows()) {
            let s: f64 = r.iter().map(|v| v.abs()).sum();
            prop_assert!(s <= theta.exp() + 1e-12);
            let so: f64 = orig.iter().map(|v| v.abs()).sum();
            if so <= theta.exp() {
                prop_assert_eq!(r, orig);
            }
        }
    }

    #[test]
    fn bound_dominates_sampled_lipschitz(dims in dims_strategy(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let act = if seed % 2 == 0 { Activation::Softplus } else { Activation::Tanh };
        let net = random_net(&dims, act, &mut r);
        let b = net.lipschitz_bound();
        prop_assert!(b.c > 0.0);
        prop_assert!(b.s >= net.layer_constants().0[0]);
        prop_assert_eq!(b.jac_bound, b.c * b.s);
        let emp = net.empirical_lipschitz(&InputBox::cube(dims[0], -3.0, 3.0), 200, &mut r).unwrap();
        prop_assert!(emp.max() <= b.c * (1.0 + 1e-9), "{} > {}", emp.max(), b.c);
    }

    #[test]
    fn penalty_is_weight_when_within_budget(dims in dims_strategy(), seed in any::<u64>(), weight in 0.0f64..5.0) {
        let net = random_net(&dims, Activation::Softplus, &mut rng(seed));
        let c = net.lipschitz_bound().c;
        let b = SmoothnessBudget::new(SmoothnessOrder::First, 2.0 * c, weight).unwrap();
        prop_assert_eq!(net.smoothness_penalty(&b), weight);
        let tight = SmoothnessBudget::new(SmoothnessOrder::First, 0.5 * c, weight).unwrap();
        prop_assert!((net.smoothness_penalty(&tight) - 2.0 * weight).abs() <= 1e-12 * weight.max(1.0));
    }

    #[test]
    fn active_first_order_penalty_gradient_is_uniform(dims in dims_strategy(), seed in any::<u64>()) {
        let net = random_net(&dims, Activation::Softplus, &mut rng(seed));
        let c = net.lipschitz_bound().c;
        let b = SmoothnessBudget::new(SmoothnessOrder::First, 0.1 * c, 0.3).unwrap();
        let (_, g) = net.smoothness_penalty_with_grad(&b);
        for v in &g {
            prop_assert!((v - g[0]).abs() <= 1e-15 * g[0].abs().max(1.0));
        }
    }

    #[test]
    fn forward_is_repeatable(dims in dims_strategy(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let net = random_net(&dims, Activation::Softplus, &mut r);
        let x = random_matrix(5, dims[0], -2.0, 2.0, &mut r);
        let a = net.forward_batch(x.view()).unwrap();
        let b = net.forward_batch(x.view()).unwrap();
        prop_assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn cauchy_increases_along_rays(
        dir in prop::collection::vec(-1.0f64..1.0, 1..5),
        sigma in 0.1f64..3.0,
        t1 in 0.0f64..10.0,
        dt in 1e-3f64..10.0,
    ) {
        prop_assume!(dir.iter().any(|v| v.abs() > 1e-3));
        let n = dir.len();
        let mu = Array1::zeros(n);
        let s = Array1::from_elem(n, sigma);
        let d = Array1::from(dir);
        let a = cauchy_nll((&d * t1).view(), mu.view(), s.view()).unwrap();
        let b = cauchy_nll((&d * (t1 + dt)).view(), mu.view(), s.view()).unwrap();
        prop_assert!(b > a);
    }

    #[test]
    fn cauchy_gradient_saturates(eps in prop::collection::vec(-50.0f64..50.0, 1..6), sigma in 0.05f64..5.0) {
        let n = eps.len();
        let x = Array1::from(eps);
        let mu = Array1::zeros(n);
        let s = Array1::from_elem(n, sigma);
        let g = cauchy_nll_grad_mu(x.view(), mu.view(), s.view()).unwrap();
        let norm = g.dot(&g).sqrt();
        prop_assert!(norm <= (n as f64 + 1.0) / (2.0 * sigma) * (1.0 + 1e-12));
    }

    #[test]
    fn mce_is_nonnegative_and_zero_only_at_zero(seed in any::<u64>(), rows in 2usize..20, cols in 1usize..4) {
        let mut r = rng(seed);
        let x = random_matrix(rows, cols, -5.0, 5.0, &mut r);
        let stats = median_mad(x.view()).unwrap();
        prop_assert_eq!(mce(x.view(), x.view(), &stats).unwrap(), 0.0);
        let mut mu = x.clone();
        mu[[r.random_range(0..rows), r.random_range(0..cols)]] += 0.5;
        prop_assert!(mce(x.view(), mu.view(), &stats).unwrap() > 0.0);
    }

    #[test]
    fn median_ignores_one_outlier(mut vals in prop::collection::vec(-100.0f64..100.0, 3..50), which in any::<prop::sample::Index>()) {
        let n = vals.len();
        let col = Array2::from_shape_vec((n, 1), vals.clone()).unwrap();
        let before = median_mad(col.view()).unwrap();
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        let gap = sorted.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        let i = which.index(n);
        vals[i] += 1e6;
        let col2 = Array2::from_shape_vec((n, 1), vals).unwrap();
        let after = median_mad(col2.view()).unwrap();
        prop_assert!((after.median[0] - before.median[0]).abs() <= gap + 1e-9);
        prop_assert!(((after.mean[0] - before.mean[0]) - 1e6 / n as f64).abs() < 1e-6);
        prop_assert!(after.mad[0] >= 0.0);
    }

    #[test]
    fn lower_median_is_an_order_statistic(mut vals in prop::collection::vec(-10.0f64..10.0, 1..30)) {
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        let m = lower_median(&mut vals);
        prop_assert_eq!(m, sorted[(sorted.len() - 1) / 2]);
    }

    #[test]
    fn normalize_round_trips(seed in any::<u64>(), cols in 1usize..5, gaussian in any::<bool>()) {
        let mut r = rng(seed);
        let data = random_matrix(30, cols, -20.0, 20.0, &mut r);
        let stats = median_mad(data.view()).unwrap();
        let kind = if gaussian { LikelihoodKind::Gaussian } else { LikelihoodKind::Cauchy };
        let x = random_matrix(1, cols, -50.0, 50.0, &mut r).row(0).to_owned();
        let back = denormalize_io(normalize_io(x.view(), &stats, kind).view(), &stats, kind);
        for (a, b) in back.iter().zip(x.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn particle_stays_above_ground(q in 0.0f64..5.0, v in -20.0f64..20.0, u in -40.0f64..40.0) {
        let cfg = ParticleConfig::default();
        let s = particle_step(ParticleState { q, v }, u, &cfg);
        prop_assert!(s.q >= 0.0);
    }

    #[test]
    fn particle_is_affine_in_flight(q in 1.0f64..5.0, v in -5.0f64..5.0, u in -20.0f64..20.0, h in 1e-4f64..1e-2) {
        let cfg = ParticleConfig::default();
        let f = |q: f64, v: f64, u: f64| particle_step(ParticleState { q, v }, u, &cfg);
        let base = f(q, v, u);
        let dq = f(q + h, v, u);
        let dv = f(q, v + h, u);
        let du = f(q, v, u + h);
        let dt = cfg.dt;
        prop_assert!(((dq.q - base.q) / h - 1.0).abs() < 1e-8);
        prop_assert!(((dv.q - base.q) / h - dt).abs() < 1e-8);
        prop_assert!(((dv.v - base.v) / h - 1.0).abs() < 1e-8);
        prop_assert!(((du.v - base.v) / h - dt).abs() < 1e-8);
        prop_assert!(((du.q - base.q) / h - dt * dt).abs() < 1e-8);
    }

    #[test]
    fn barrier_is_c1_and_convex(delta in 1e-3f64..1.0, g in -5.0f64..2.0) {
        let at = -delta;
        let left = at.next_down();
        prop_assert!((relaxed_barrier(left, delta) - relaxed_barrier(at, delta)).abs() < 1e-10);
        prop_assert!(
            (relaxed_barrier_derivative(left, delta) - relaxed_barrier_derivative(at, delta)).abs()
                < 1e-10 * relaxed_barrier_derivative(at, delta).abs().max(1.0)
        );
        prop_assert!(relaxed_barrier_second(g, delta) > 0.0);
        prop_assert!(relaxed_barrier_derivative(g, delta) > 0.0);
    }

    #[test]
    fn spline_actions_are_linear_in_knots(
        k in 2usize..6,
        extra in 0usize..15,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        seed in any::<u64>(),
        linear in any::<bool>(),
    ) {
        let t = k + extra;
        let kind = if linear { SplineKind::Linear } else { SplineKind::ZeroOrder };
        let mut r = rng(seed);
        let k1 = random_matrix(k, 2, -5.0, 5.0, &mut r);
        let k2 = random_matrix(k, 2, -5.0, 5.0, &mut r);
        let act = |kn: Array2<f64>| SplineControl::new(kn, t, kind).unwrap().actions();
        let lhs = act(&k1 * a + &k2 * b);
        let rhs = act(k1) * a + act(k2) * b;
        prop_assert!(lhs.iter().zip(rhs.iter()).all(|(p, q)| (p - q).abs() < 1e-10));
        let c = act(Array2::from_elem((k, 2), 1.7));
        prop_assert!(c.iter().all(|v| (v - 1.7).abs() < 1e-12));
    }

    #[test]
    fn softmin_is_a_distribution(costs in prop::collection::vec(0.0f64..100.0, 1..40), tau in 0.0f64..10.0) {
        let w = softmin_weights(&costs, tau);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let best = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        let wmax = w.iter().cloned().fold(0.0, f64::max);
        for (c, v) in costs.iter().zip(&w) {
            if *c == best {
                prop_assert_eq!(*v, wmax);
            }
        }
    }

    #[test]
    fn sampler_scale_anneals_exactly(sigma in prop::collection::vec(0.01f64..10.0, 1..4), rho in 0.01f64..1.0, i in 0usize..12) {
        let cfg = SamplerConfig { sigma: sigma.clone(), rho, ..Default::default() };
        let s = cfg.scale_at(i);
        for (a, b) in s.iter().zip(&sigma) {
            prop_assert_eq!(*a, b * rho.powi(i as i32));
        }
    }

    #[test]
    fn replay_buffer_is_fifo(cap in 1usize..8, pushes in 0usize..20) {
        let mut buf = ReplayBuffer::new(cap).unwrap();
        for s in 0..pushes {
            buf.push(Episode {
                states: Array2::zeros((2, 2)),
                actions: Array2::zeros((1, 1)),
                measurements: Array2::zeros((2, 1)),
                seed: s as u64,
            });
            prop_assert!(buf.len() <= cap);
        }
        let seeds: Vec<u64> = buf.iter().map(|e| e.seed).collect();
        let first = pushes.saturating_sub(cap) as u64;
        prop_assert_eq!(seeds, (first..pushes as u64).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn posterior_copies_measurements(seed in any::<u64>(), history in 1usize..4) {
        let eps = generate_particle_dataset(&ParticleConfig::default(), 2, seed % 1000).unwrap();
        let cfg = TrainConfig { history, ..Default::default() };
        let stats = ModelStats::from_episodes(&eps, cfg.kind).unwrap();
        let spec = ModelSpec { dynamics_hidden: vec![6], estimator_hidden: vec![6], ..Default::default() };
        let mut r = rng(seed);
        let (dynamics, mut est) = build_models(&spec, &stats, vec![0], &cfg, &mut r).unwrap();
        est.net = random_net(&[est.net.input_dim(), 6, est.net.output_dim()], Activation::Softplus, &mut r);
        let rows = history + 1;
        let prior_prev = HistoryWindow::new(random_matrix(rows, 2, 0.0, 3.0, &mut r), random_matrix(rows, 1, -10.0, 10.0, &mut r)).unwrap();
        let y_hist = random_matrix(rows, 1, 0.0, 3.0, &mut r);
        let (prior, nu, g_nu) = sns_core::estimator::innovation(
            y_hist.row(rows - 1),
            &prior_prev,
            &dynamics,
            &est.measurement,
        ).unwrap();
        let post = est.correct(&prior, y_hist.view(), nu.view(), g_nu.view()).unwrap();
        for j in 0..rows {
            prop_assert_eq!(post.x[[j, 0]].to_bits(), y_hist[[j, 0]].to_bits());
        }
        prop_assert_eq!(&post.u, &prior.u);

        // zero correction output leaves unmeasured components at the prior
        let last = est.net.layers.len() - 1;
        est.net.layers[last].weight.fill(0.0);
        est.net.layers[last].bias.fill(0.0);
        let post0 = est.correct(&prior, y_hist.view(), nu.view(), g_nu.view()).unwrap();
        for j in 0..rows {
            prop_assert_eq!(post0.x[[j, 1]], prior.x[[j, 1]]);
        }
    }
}
