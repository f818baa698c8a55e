mod common;

use common::{central_diff, learned, max_rel_err, problem, random_matrix, rng};
use ndarray::{Array2, Axis};
use sns_core::dynamics::ParticleDynamics;
use sns_core::estimator::HistoryWindow;
use sns_core::linalg::symmetric_eigenvalues;
use sns_core::sampling_baseline::{sample_solve, SamplerConfig};
use sns_core::shooting_mpc::{build_ggn, evaluate_candidates, evaluate_cost, mpc_solve, rollout, rollout_batch, SplineKind};
use sns_core::tasks::ParticleConfig;

#[test]
fn knot_gradient_matches_differences() {
    for case in 0..10u64 {
        let d = learned(600 + case, 2);
        let mut r = rng(case);
        let kind = if case % 2 == 0 { SplineKind::Linear } else { SplineKind::ZeroOrder };
        let p = problem(&d, 2 + case as usize % 4, 10, kind, &mut r);
        let ctrl = p.control(p.initial_knots.clone()).unwrap();
        let (_, q, cost) = build_ggn(&d, &p, &ctrl).unwrap();
        assert!((cost - evaluate_cost(&d, &p, &p.initial_knots).unwrap()).abs() < 1e-10 * cost.abs().max(1.0));
        let flat: Vec<f64> = p.initial_knots.iter().copied().collect();
        let numeric = central_diff(&flat, 1e-5, |k| {
            let knots = Array2::from_shape_vec(p.initial_knots.raw_dim(), k.to_vec()).unwrap();
            evaluate_cost(&d, &p, &knots).unwrap()
        });
        let err = max_rel_err(q.as_slice().unwrap(), &numeric);
        assert!(err < 1e-4, "case {case}: rel err {err:e}");
    }
}

#[test]
fn gauss_newton_matrix_is_psd() {
    for case in 0..10u64 {
        let d = learned(700 + case, 1);
        let p = problem(&d, 4, 12, SplineKind::Linear, &mut rng(case));
        let (h, _, _) = build_ggn(&d, &p, &p.control(p.initial_knots.clone()).unwrap()).unwrap();
        assert!((&h - &h.t()).iter().all(|v| v.abs() < 1e-12 * h.iter().fold(1.0f64, |m, x| m.max(x.abs()))));
        let eig = symmetric_eigenvalues(h.view());
        let top = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(eig.iter().all(|&l| l >= -1e-10 * top), "case {case}: {eig:?}");
    }
}

#[test]
fn line_search_costs_never_increase() {
    for case in 0..5u64 {
        let d = learned(800 + case, 2);
        let p = problem(&d, 3, 10, SplineKind::Linear, &mut rng(case));
        let rep = mpc_solve(&d, &p).unwrap();
        assert_eq!(rep.costs.len(), 4);
        assert!(rep.is_monotone(), "case {case}: {:?}", rep.costs);
        assert!(rep.alphas.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}

#[test]
fn batched_rollout_matches_sequential() {
    let d = learned(900, 2);
    let p = problem(&d, 3, 9, SplineKind::Linear, &mut rng(1));
    let mut r = rng(2);
    let cands: Vec<Array2<f64>> = (0..40).map(|_| random_matrix(3, 1, 0.0, 20.0, &mut r)).collect();
    let costs = evaluate_candidates(&d, &p, &cands).unwrap();
    for (c, k) in costs.iter().zip(&cands) {
        let seq = evaluate_cost(&d, &p, k).unwrap();
        assert!((c - seq).abs() <= 1e-10 * seq.abs().max(1.0));
    }
    let actions = p.control(cands[0].clone()).unwrap().actions();
    let batched = rollout_batch(&d, &p.initial, &actions.clone().insert_axis(Axis(0))).unwrap();
    let seq = rollout(&d, &p.initial, actions.view()).unwrap();
    assert!((&batched.index_axis(Axis(0), 0) - &seq).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn nonfinite_rollout_reports_step() {
    let d = ParticleDynamics {
        config: ParticleConfig::default(),
        history: 0,
    };
    let init = HistoryWindow::new(Array2::from_elem((1, 2), 1.0), Array2::zeros((1, 1))).unwrap();
    let mut actions = Array2::from_elem((5, 1), 9.81);
    actions[[3, 0]] = f64::NAN;
    let err = rollout(&d, &init, actions.view()).unwrap_err().to_string();
    assert!(err.contains("step 3"), "{err}");
}

#[test]
fn sampler_degenerate_settings_keep_knots() {
    let d = learned(901, 1);
    let p = problem(&d, 3, 8, SplineKind::Linear, &mut rng(3));
    let cfg = SamplerConfig {
        samples: 1,
        iterations: 3,
        sigma: vec![0.0],
        rho: 0.5,
        tau: 0.0,
        seed: 4,
    };
    let rep = sample_solve(&d, &p, &cfg).unwrap();
    assert_eq!(rep.knots, p.initial_knots);
}

#[test]
fn sampler_is_seed_deterministic() {
    let d = learned(902, 1);
    let p = problem(&d, 3, 8, SplineKind::Linear, &mut rng(5));
    let cfg = SamplerConfig {
        samples: 64,
        iterations: 3,
        sigma: vec![3.0],
        ..Default::default()
    };
    let a = sample_solve(&d, &p, &cfg).unwrap();
    let b = sample_solve(&d, &p, &cfg).unwrap();
    assert_eq!(a.knots, b.knots);
    assert_eq!(a.costs, b.costs);
    assert!(a.final_cost() <= a.costs[0] * 1.5);
}

#[test]
fn report_round_trips_through_json() {
    let d = learned(903, 1);
    let p = problem(&d, 3, 8, SplineKind::Linear, &mut rng(6));
    let rep = mpc_solve(&d, &p).unwrap();
    let text = serde_json::to_string(&rep).unwrap();
    let back: sns_core::shooting_mpc::SolveReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, rep);
}
