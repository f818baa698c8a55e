//! End-to-end acceptance suite. Every criterion prints one PASS/FAIL line
//! straight to stdout and then asserts.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use common::{central_diff, learned, max_rel_err, problem, random_matrix, random_net, rng};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::Rng;
use sns_core::dynamics::{DynamicsModel, HistoryDynamics, LinearDynamics};
use sns_core::estimator::{innovation, HistoryWindow};
use sns_core::experiments::{
    run_fit, run_mpc_compare, run_mpc_compare_with, run_particle_pipeline, run_residual_report, synthetic_residuals,
    ComparisonReport, ExperimentConfig, FitSummary, ParticleReport, SyntheticResiduals,
};
use sns_core::linalg::spectral_norm;
use sns_core::robust_loss::{fit_residual_report, LikelihoodKind};
use sns_core::shooting_mpc::{
    build_ggn, evaluate_cost, mpc_solve, relaxed_barrier, relaxed_barrier_derivative, CostTerm, ProblemConfig,
    ResidualLoss, ShootingProblem, SplineKind,
};
use sns_core::smooth_net::{Activation, InputBox, SmoothnessBudget, SmoothnessOrder};
use sns_core::tasks::{generate_particle_dataset, ParticleConfig};
use sns_core::trainer::{
    build_models, corrupt_loss, load_checkpoint, run_filter, ConcurrentTrainer, ModelSpec, ModelStats, TrainConfig,
    TrajectoryBatch,
};
use tempfile::TempDir;

fn report(name: &str, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "\n{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = out.flush();
}

fn config(json: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(json).unwrap()
}

fn fit(json: &str) -> (FitSummary, f64) {
    let dir = TempDir::new().unwrap();
    let t = Instant::now();
    let s = run_fit(&config(json), dir.path()).unwrap();
    (s, t.elapsed().as_secs_f64())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- network bounds

fn random_dims<R: Rng>(r: &mut R) -> Vec<usize> {
    let hidden = r.random_range(2..=5);
    let mut dims = vec![r.random_range(1..=8)];
    for _ in 0..hidden {
        dims.push(r.random_range(1..=64));
    }
    dims.push(r.random_range(1..=4));
    dims
}

#[test]
fn bound_soundness() {
    let t = Instant::now();
    let mut r = rng(1000);
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dims = random_dims(&mut r);
        let net = random_net(&dims, Activation::Softplus, &mut r);
        let c = net.lipschitz_bound().c;
        let emp = net.empirical_lipschitz(&InputBox::cube(dims[0], -3.0, 3.0), 10_000, &mut r).unwrap();
        worst = worst.max(emp.max() / c);
        if emp.max() > c {
            violations += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = violations == 0 && secs < 120.0;
    report(
        "bound_soundness",
        pass,
        &format!("100 nets x 10k pairs, {violations} violations, max empirical/C {worst:.4}, {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn curvature_bound() {
    let mut r = rng(2000);
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let dims = random_dims(&mut r);
        let net = random_net(&dims, Activation::Softplus, &mut r);
        let b = net.lipschitz_bound();
        let limit = 0.25 * b.c * b.s;
        let (xa, xb) = InputBox::cube(dims[0], -3.0, 3.0).sample_pairs(&mut r, 10_000);
        let ja = net.input_jacobians(xa.view()).unwrap();
        let jb = net.input_jacobians(xb.view()).unwrap();
        for i in 0..xa.nrows() {
            let dx = &xa.row(i) - &xb.row(i);
            let dist = dx.dot(&dx).sqrt();
            if dist == 0.0 {
                continue;
            }
            let ratio = spectral_norm((&ja[i] - &jb[i]).view()) / dist;
            worst = worst.max(ratio / limit);
            if ratio > limit {
                violations += 1;
            }
        }
    }
    let pass = violations == 0;
    report(
        "curvature_bound",
        pass,
        &format!("50 nets x 10k pairs, {violations} violations, max ratio/(C*S/4) {worst:.4}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- gradients

fn gradient_suite() -> BTreeMap<&'static str, f64> {
    const H: f64 = 1e-5;
    let mut worst = BTreeMap::new();
    let mut r = rng(3000);

    let mut e: f64 = 0.0;
    for case in 0..20 {
        let dims = [r.random_range(1..4), r.random_range(2..7), r.random_range(2..7), r.random_range(1..3)];
        let act = [Activation::Softplus, Activation::Tanh][case % 2];
        let p = random_net(&dims, act, &mut r);
        let x = random_matrix(4, dims[0], -2.0, 2.0, &mut r);
        let w = random_matrix(4, dims[3], -1.0, 1.0, &mut r);
        let tape = p.forward_tape(x.view()).unwrap();
        let analytic = p.backward(&tape, w.view(), true).0.unwrap().to_flat();
        let numeric = central_diff(&p.to_flat(), H, |flat| {
            let mut q = p.clone();
            q.set_flat(flat).unwrap();
            (q.forward_batch(x.view()).unwrap() * &w).sum()
        });
        e = e.max(max_rel_err(&analytic, &numeric));
    }
    worst.insert("network_params", e);

    let mut e: f64 = 0.0;
    for case in 0..20 {
        let p = random_net(&[2, 5, 5, 1], Activation::Softplus, &mut r);
        let b = p.lipschitz_bound();
        let budget = if case % 2 == 0 {
            SmoothnessBudget::new(SmoothnessOrder::First, 0.5 * b.c, 0.7).unwrap()
        } else {
            SmoothnessBudget::new(SmoothnessOrder::Second, 0.5 * b.jac_bound, 0.7).unwrap()
        };
        let (_, dtheta) = p.smoothness_penalty_with_grad(&budget);
        let thetas: Vec<f64> = p.layers.iter().map(|l| l.theta_c).collect();
        let numeric = central_diff(&thetas, H, |th| {
            let mut q = p.clone();
            q.layers.iter_mut().zip(th).for_each(|(l, t)| l.theta_c = *t);
            q.smoothness_penalty(&budget)
        });
        e = e.max(max_rel_err(&dtheta, &numeric));
    }
    worst.insert("penalty_theta", e);

    let mut e: f64 = 0.0;
    for case in 0..20u64 {
        let d = learned(3100 + case, 1 + case as usize % 3);
        let kind = if case % 2 == 0 { SplineKind::Linear } else { SplineKind::ZeroOrder };
        let p = problem(&d, 2 + case as usize % 4, 10, kind, &mut rng(case));
        let (_, q, _) = build_ggn(&d, &p, &p.control(p.initial_knots.clone()).unwrap()).unwrap();
        let flat: Vec<f64> = p.initial_knots.iter().copied().collect();
        let numeric = central_diff(&flat, H, |k| {
            let knots = Array2::from_shape_vec(p.initial_knots.raw_dim(), k.to_vec()).unwrap();
            evaluate_cost(&d, &p, &knots).unwrap()
        });
        e = e.max(max_rel_err(q.as_slice().unwrap(), &numeric));
    }
    worst.insert("knots_through_rollout", e);

    let mut e: f64 = 0.0;
    for case in 0..20u64 {
        let d = learned(3200 + case, 2);
        let x = random_matrix(3, 2, 0.0, 2.0, &mut r);
        let u = random_matrix(3, 1, -10.0, 10.0, &mut r);
        let post = HistoryWindow::new(x.clone(), u.clone()).unwrap();
        let y = Array1::from(vec![r.random_range(0.0..2.0)]);
        let h = sns_core::estimator::MeasurementMap::new(vec![0], 2).unwrap();
        let (_, _, g) = innovation(y.view(), &post, &d, &h).unwrap();
        let flat: Vec<f64> = x.iter().chain(u.iter()).copied().collect();
        let numeric = central_diff(&flat, H, |v| {
            let xs = Array2::from_shape_vec((3, 2), v[..6].to_vec()).unwrap();
            let us = Array2::from_shape_vec((3, 1), v[6..].to_vec()).unwrap();
            (y[0] - d.step(xs.view(), us.view()).unwrap()[0]).powi(2)
        });
        e = e.max(max_rel_err(g.as_slice().unwrap(), &numeric));
    }
    worst.insert("innovation", e);
    worst
}

#[test]
fn gradient_suite_matches_differences() {
    let worst = gradient_suite();
    let tol = |k: &str| if k == "knots_through_rollout" { 1e-4 } else { 1e-5 };
    let pass = worst.iter().all(|(k, v)| *v < tol(k));
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.2e}")).collect();
    report("gradient_suite", pass, &format!("20 instances each, max rel err: {}", detail.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- surrogate fits

#[test]
fn relu_fit() {
    let (s, secs) = fit(
        r#"{"seed": 0, "fit": {"task": "relu", "samples": 5000, "holdout": 1000, "log_every": 100,
            "training": {"epochs": 3000, "batch_size": 256,
              "optimizer": {"lr": 0.01, "decay_steps": 60000, "final_lr_fraction": 0.01},
              "budget": {"order": "first", "budget": 1.0, "weight": 0.1}}}}"#,
    );
    let pass = s.test_mse < 5e-3 && s.c <= 1.001 && secs < 300.0;
    report(
        "relu_fit",
        pass,
        &format!("test mse {:.2e}, C {:.5}, {secs:.0}s", s.test_mse, s.c),
    );
    assert!(pass);
}

#[test]
fn piecewise_fit() {
    let arm = |network: &str, budget: &str| {
        fit(&format!(
            r#"{{"seed": 0, "fit": {{"task": "piecewise", "samples": 5000, "holdout": 1000, "log_every": 50,
                "network": {network},
                "training": {{"epochs": 1000, "batch_size": 64,
                  "optimizer": {{"lr": 0.01, "decay_steps": 80000, "final_lr_fraction": 0.01}},
                  "budget": {budget}}}}}}}"#
        ))
        .0
    };
    let sns = arm("{}", r#"{"order": "first", "budget": 1.35, "weight": 0.1}"#);
    let mlp = arm(r#"{"normalization_enabled": false}"#, "null");
    let pass = sns.c <= 1.36 && mlp.empirical_lipschitz > 2.0 * 1.35 && sns.test_mse < 1e-2 && mlp.test_mse < 1e-2;
    report(
        "piecewise_fit",
        pass,
        &format!(
            "SNS C {:.4} mse {:.2e}; MLP empirical Lipschitz {:.2} mse {:.2e}",
            sns.c, sns.test_mse, mlp.empirical_lipschitz, mlp.test_mse
        ),
    );
    assert!(pass);
}

#[test]
fn particle_fit() {
    let arm = |network: &str, budget: &str| {
        fit(&format!(
            r#"{{"seed": 0, "fit": {{"task": "particle_onestep", "trajectories": 500, "holdout_trajectories": 50,
                "log_every": 25, "network": {network},
                "training": {{"epochs": 500, "batch_size": 256, "optimizer": {{"lr": 0.001}}, "budget": {budget}}}}}}}"#
        ))
        .0
    };
    let sns = arm(r#"{"hidden": [32, 32]}"#, r#"{"order": "first", "budget": 50.0, "weight": 0.2}"#);
    let mlp = arm(r#"{"hidden": [32, 32], "normalization_enabled": false}"#, "null");
    let sns_mae = mean(&sns.test_normalized_mae);
    let mlp_mae = mean(&mlp.test_normalized_mae);
    let bounded = sns.max_jacobian_2norm <= 50.0;
    let stiffer = mlp.max_jacobian_2norm > sns.max_jacobian_2norm;
    let close = sns_mae <= 2.0 * mlp_mae;
    let pass = bounded && stiffer && close;
    report(
        "particle_fit",
        pass,
        &format!(
            "SNS max |J|2 {:.2} (|J|inf {:.2}, C {:.2}); MLP max |J|2 {:.1}; normalized MAE SNS {:?} vs MLP {:?}, ratio {:.2}",
            sns.max_jacobian_2norm,
            sns.max_jacobian_inf_norm,
            sns.c,
            mlp.max_jacobian_2norm,
            sns.test_normalized_mae,
            mlp.test_normalized_mae,
            sns_mae / mlp_mae
        ),
    );
    assert!(bounded, "SNS Jacobian exceeds the budget");
    assert!(stiffer, "MLP Jacobians are not stiffer");
    assert!(close, "SNS normalized MAE {sns_mae} is more than twice the MLP's {mlp_mae}");
}

// ---------------------------------------------------------------- likelihoods

#[test]
fn likelihood_diagnostics_rank_the_generator() {
    let mut ok = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        for kind in [LikelihoodKind::Cauchy, LikelihoodKind::Gaussian] {
            let spec = SyntheticResiduals {
                kind,
                samples: 100_000,
                dims: 2,
                scale: 0.3,
            };
            let res = fit_residual_report(synthetic_residuals(&spec, seed).view()).unwrap();
            let want = match kind {
                LikelihoodKind::Cauchy => "cauchy",
                LikelihoodKind::Gaussian => "gaussian",
            };
            let best: Vec<_> = res.iter().map(|f| f.best().unwrap_or("degenerate")).collect();
            if best.iter().all(|b| *b == want) {
                ok += 1;
            } else {
                lines.push(format!("seed {seed} {want}: {best:?}"));
            }
        }
    }
    let pass = ok == 10;
    report(
        "likelihood_diagnostics",
        pass,
        &format!("{ok}/10 seed x generator cases ranked correctly {}", lines.join("; ")),
    );
    assert!(pass);
}

#[test]
fn robust_training_beats_gaussian_under_outliers() {
    let arm = |kind: &str, seed: u64| {
        fit(&format!(
            r#"{{"seed": {seed}, "fit": {{"task": "particle_onestep", "trajectories": 100, "holdout_trajectories": 20,
                "log_every": 50, "outlier_fraction": 0.1, "likelihood": "{kind}", "network": {{"hidden": [32, 32]}},
                "training": {{"epochs": 200, "batch_size": 256, "optimizer": {{"lr": 0.001}},
                  "budget": {{"order": "first", "budget": 50.0, "weight": 0.2}}}}}}}}"#
        ))
        .0
        .test_median_error
    };
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let (c, g) = (arm("cauchy", seed), arm("gaussian", seed));
        if c < g {
            wins += 1;
        }
        pairs.push(format!("{c:.4}/{g:.4}"));
    }
    let pass = wins >= 4;
    report(
        "robust_training",
        pass,
        &format!("Cauchy lower median error on {wins}/5 seeds (cauchy/gaussian {})", pairs.join(" ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- solver

#[test]
fn ggn_solves_linear_quadratic_in_one_step() {
    let d = LinearDynamics {
        a: Array2::from_shape_vec((2, 2), vec![1.0, 0.05, 0.0, 1.0]).unwrap(),
        b: Array2::from_shape_vec((2, 1), vec![0.00125, 0.05]).unwrap(),
        history: 0,
    };
    let horizon = 15;
    let p = ShootingProblem {
        config: ProblemConfig {
            horizon,
            knots: 5,
            costs: vec![
                CostTerm::StateTracking {
                    index: 0,
                    reference: (0..horizon).map(|t| (t as f64 * 0.3).sin()).collect(),
                    weight: 1.0,
                    loss: ResidualLoss::Quadratic,
                },
                CostTerm::ActionEffort {
                    index: 0,
                    reference: 0.0,
                    weight: 1e-3,
                    loss: ResidualLoss::Quadratic,
                },
                CostTerm::ActionRate {
                    index: 0,
                    weight: 1e-3,
                    loss: ResidualLoss::Quadratic,
                },
            ],
            rollouts: 11,
            iterations: 1,
            ..Default::default()
        },
        initial: HistoryWindow::new(Array2::from_shape_vec((1, 2), vec![0.2, -0.1]).unwrap(), Array2::zeros((1, 1)))
            .unwrap(),
        initial_knots: Array2::from_shape_vec((5, 1), vec![0.5, -0.3, 0.2, 0.1, -0.4]).unwrap(),
    };
    // the cost is exactly quadratic in the knots: recover it from evaluations
    let k = 5;
    let cost = |v: &[f64]| evaluate_cost(&d, &p, &Array2::from_shape_vec((k, 1), v.to_vec()).unwrap()).unwrap();
    let zero = vec![0.0; k];
    let j0 = cost(&zero);
    let unit = |i: usize, s: f64| {
        let mut v = zero.clone();
        v[i] = s;
        v
    };
    let mut hm = DMatrix::zeros(k, k);
    let mut g = DVector::zeros(k);
    for i in 0..k {
        let (jp, jm) = (cost(&unit(i, 1.0)), cost(&unit(i, -1.0)));
        hm[(i, i)] = jp + jm - 2.0 * j0;
        g[i] = 0.5 * (jp - jm);
    }
    for i in 0..k {
        for j in 0..i {
            let mut v = zero.clone();
            v[i] = 1.0;
            v[j] = 1.0;
            let hij = cost(&v) - j0 - g[i] - g[j] - 0.5 * (hm[(i, i)] + hm[(j, j)]);
            hm[(i, j)] = hij;
            hm[(j, i)] = hij;
        }
    }
    let optimum = hm.cholesky().expect("positive definite").solve(&(-g));
    let rep = mpc_solve(&d, &p).unwrap();
    let err = rep.knots.iter().zip(optimum.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let pass = err < 1e-8 && rep.alphas == vec![1.0];
    report(
        "ggn_exactness",
        pass,
        &format!("max |knot - normal-equation optimum| {err:.2e}, alpha {:?}", rep.alphas),
    );
    assert!(pass);
}

#[test]
fn barrier_is_continuous_and_calibrated() {
    let mut worst_v: f64 = 0.0;
    let mut worst_d: f64 = 0.0;
    for delta in [1e-3f64, 0.01, 0.05, 0.3, 1.0, 2.5] {
        let at = -delta;
        let left = at.next_down();
        worst_v = worst_v.max((relaxed_barrier(left, delta) - relaxed_barrier(at, delta)).abs());
        worst_d = worst_d.max((relaxed_barrier_derivative(left, delta) - relaxed_barrier_derivative(at, delta)).abs());
    }
    let v0 = relaxed_barrier(0.0, 0.01);
    let pass = worst_v < 1e-10 && worst_d < 1e-10 && (v0 - 6.10517).abs() < 1e-5;
    report(
        "barrier",
        pass,
        &format!("jump at -delta: value {worst_v:.1e}, derivative {worst_d:.1e}; B(0; 0.01) = {v0:.6}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- pipeline + MPC

const PIPELINE: &str = r#"{"seed": SEED, "particle": {"trajectories": 100, "holdout_trajectories": 20,
    "train_steps": 5000, "log_every": 50}}"#;

fn pipeline(seed: u64, out: &Path) -> ParticleReport {
    run_particle_pipeline(&config(&PIPELINE.replace("SEED", &seed.to_string())), out).unwrap()
}

/// Seed-0 pipeline, shared by the estimator and planner criteria.
fn trained() -> &'static (PathBuf, ParticleReport) {
    static CELL: OnceLock<(PathBuf, ParticleReport)> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_pipeline");
        let _ = std::fs::remove_dir_all(&dir);
        let rep = pipeline(0, &dir);
        (dir, rep)
    })
}

fn comparison() -> &'static (ComparisonReport, f64) {
    static CELL: OnceLock<(ComparisonReport, f64)> = OnceLock::new();
    CELL.get_or_init(|| {
        let ck = trained().0.join("dynamics.json");
        let model: DynamicsModel = load_checkpoint(&ck).unwrap().model;
        let out = TempDir::new().unwrap();
        let t = Instant::now();
        let rep = run_mpc_compare_with(&ExperimentConfig::default(), &model, out.path()).unwrap();
        (rep, t.elapsed().as_secs_f64())
    })
}

#[test]
fn ggn_descent_is_monotone() {
    let (rep, _) = comparison();
    let rows_with_violations = rep.rows.iter().filter(|r| r.method == "ggn" && r.monotone_violations > 0).count();
    let pass = rep.total_monotone_violations == 0 && rows_with_violations == 0;
    report(
        "monotone_descent",
        pass,
        &format!("{} rows, {} violations", rep.rows.len(), rep.total_monotone_violations),
    );
    assert!(pass);
}

#[test]
fn ggn_beats_sampler_on_tracking() {
    let (rep, secs) = comparison();
    let headline: Vec<String> = rep
        .rows
        .iter()
        .filter(|r| r.knots == 5)
        .map(|r| format!("{}:{}={:.4}", r.method, r.seed, r.cumulative_cost))
        .collect();
    let pass = rep.ggn_wins >= 4 && *secs < 600.0;
    report(
        "optimizer_head_to_head",
        pass,
        &format!("GGN no worse on {}/{} seeds, {secs:.0}s; {}", rep.ggn_wins, rep.seeds, headline.join(" ")),
    );
    assert!(pass);
}

fn stop_gradient_probe() -> bool {
    let eps = generate_particle_dataset(&ParticleConfig::default(), 6, 77).unwrap();
    let cfg = TrainConfig {
        horizon: 4,
        history: 2,
        batch_size: 4,
        ..Default::default()
    };
    let stats = ModelStats::from_episodes(&eps, cfg.kind).unwrap();
    let mut r = rng(77);
    let spec = ModelSpec {
        dynamics_hidden: vec![6],
        estimator_hidden: vec![5],
        ..Default::default()
    };
    let (mut dynamics, mut estimator) = build_models(&spec, &stats, vec![0], &cfg, &mut r).unwrap();
    dynamics.net = random_net(&[dynamics.net.input_dim(), 6, 2], Activation::Softplus, &mut r);
    estimator.net = random_net(&[estimator.net.input_dim(), 5, estimator.net.output_dim()], Activation::Softplus, &mut r);
    let batch = TrajectoryBatch::sample(&eps, cfg.batch_size, cfg.horizon, cfg.history, &mut r).unwrap();

    let mut tr = ConcurrentTrainer::new(dynamics.clone(), estimator.clone(), cfg.clone()).unwrap();
    tr.train_dynamics_step(&batch, &mut rng(1)).unwrap();
    let estimator_untouched = tr.estimator.net == estimator.net;
    let dyn_before = tr.dynamics.net.clone();
    tr.train_estimator_step(&batch, &mut rng(2)).unwrap();
    let dynamics_untouched = tr.dynamics.net == dyn_before;

    let posteriors = run_filter(&batch, &dynamics, &estimator, &cfg, false, &mut rng(3)).unwrap().posteriors;
    let g0 = corrupt_loss(&batch, &dynamics, &posteriors, true).unwrap().grads.unwrap();
    let mut shifted = estimator.clone();
    shifted.net.layers[0].bias.mapv_inplace(|b| b + 0.5);
    let _ = run_filter(&batch, &dynamics, &shifted, &cfg, false, &mut rng(3)).unwrap();
    let g1 = corrupt_loss(&batch, &dynamics, &posteriors, true).unwrap().grads.unwrap();
    estimator_untouched && dynamics_untouched && g0 == g1
}

#[test]
fn estimator_improves_on_prior() {
    let mut better = 0;
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let rep = if seed == 0 {
            trained().1.clone()
        } else {
            let dir = TempDir::new().unwrap();
            pipeline(seed, dir.path())
        };
        if rep.estimator_posterior_mae < rep.estimator_prior_mae {
            better += 1;
        }
        pairs.push(format!("{:.4}/{:.4}", rep.estimator_posterior_mae, rep.estimator_prior_mae));
    }
    let contracts = stop_gradient_probe();
    let pass = better == 5 && contracts;
    report(
        "estimator_efficacy",
        pass,
        &format!(
            "posterior < prior velocity MAE on {better}/5 seeds (posterior/prior {}); stop-gradient probes {}",
            pairs.join(" "),
            if contracts { "hold" } else { "broken" }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- determinism

fn csvs(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "csv") && p.file_name().is_some_and(|n| n != "timings.csv") {
            out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn reruns_are_byte_identical() {
    let root = TempDir::new().unwrap();
    let particle_dir = root.path().join("particle_a");
    let ck = particle_dir.join("dynamics.json");
    let data = particle_dir.join("dataset");
    let small_particle = r#"{"seed": 4, "particle": {"trajectories": 8, "holdout_trajectories": 4, "train_steps": 40,
        "log_every": 5, "collect": {"rounds": 1, "episodes_per_round": 1, "steps_per_round": 40}}}"#
        .to_string();
    let runs: Vec<(&str, String)> = vec![
        (
            "fit_relu",
            r#"{"seed": 3, "fit": {"samples": 300, "holdout": 100, "log_every": 5, "grid_points": 51,
                "final_lipschitz_pairs": 500, "jacobian_samples": 100, "training": {"epochs": 20}}}"#
                .into(),
        ),
        (
            "fit_particle",
            r#"{"seed": 3, "fit": {"task": "particle_onestep", "trajectories": 6, "holdout_trajectories": 2,
                "log_every": 2, "outlier_fraction": 0.1, "likelihood": "cauchy", "network": {"hidden": [8]},
                "final_lipschitz_pairs": 500, "jacobian_samples": 100, "grid_points": 11,
                "training": {"epochs": 4, "optimizer": {"lr": 0.001}}}}"#
                .into(),
        ),
        ("particle", small_particle),
        (
            "mpc_compare",
            format!(
                r#"{{"seed": 5, "mpc": {{"checkpoint": {:?}, "knots": [3], "seeds": 2, "task": {{"steps": 15}}}}}}"#,
                ck
            ),
        ),
        (
            "residual_report",
            format!(r#"{{"seed": 6, "residual": {{"checkpoint": {:?}, "dataset": {:?}}}}}"#, ck, data),
        ),
        (
            "residual_synthetic",
            r#"{"seed": 6, "residual": {"synthetic": {"kind": "cauchy", "samples": 2000, "dims": 3, "scale": 1.0}}}"#
                .into(),
        ),
    ];
    let mut mismatches = Vec::new();
    let mut compared = 0;
    for (name, json) in &runs {
        let cfg = config(json);
        let dirs = [root.path().join(format!("{name}_a")), root.path().join(format!("{name}_b"))];
        for d in &dirs {
            match *name {
                "fit_relu" | "fit_particle" => drop(run_fit(&cfg, d).unwrap()),
                "particle" => drop(run_particle_pipeline(&cfg, d).unwrap()),
                "mpc_compare" => drop(run_mpc_compare(&cfg, d).unwrap()),
                _ => drop(run_residual_report(&cfg, d).unwrap()),
            }
        }
        let (a, b) = (csvs(&dirs[0]), csvs(&dirs[1]));
        if a.is_empty() || a.keys().ne(b.keys()) {
            mismatches.push(format!("{name}: file sets differ"));
            continue;
        }
        for (file, bytes) in &a {
            compared += 1;
            if &b[file] != bytes {
                mismatches.push(format!("{name}/{}", file.display()));
            }
        }
    }
    let pass = mismatches.is_empty();
    report(
        "determinism",
        pass,
        &format!("{} experiments, {compared} CSVs compared, mismatches {mismatches:?}", runs.len()),
    );
    assert!(pass);
}
