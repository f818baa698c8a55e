#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sns_core::dynamics::{DynamicsModel, HistoryDynamics};
use sns_core::estimator::HistoryWindow;
use sns_core::shooting_mpc::{
    BarrierConstraint, BoundSide, ConstraintTarget, CostTerm, ProblemConfig, ResidualLoss, ShootingProblem, SplineKind,
};
use sns_core::smooth_net::{Activation, MlpParams};
use sns_core::tasks::{generate_particle_dataset, ParticleConfig};
use sns_core::trainer::{build_models, ModelSpec, ModelStats, TrainConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let fp = f(&p);
            p[i] = orig - h;
            let fm = f(&p);
            p[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise error relative to `max(|a|, |b|, 1e-3·‖b‖∞)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Random net, with some layers over budget so the clipping branch is hit.
pub fn random_net<R: Rng>(dims: &[usize], act: Activation, rng: &mut R) -> MlpParams {
    let mut p = MlpParams::init(dims, act, true, rng).unwrap();
    for l in &mut p.layers {
        l.theta_c -= rng.random_range(0.0..1.0);
    }
    p
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

/// Particle-shaped learned dynamics with a random network.
pub fn learned(seed: u64, history: usize) -> DynamicsModel {
    let eps = generate_particle_dataset(&ParticleConfig::default(), 4, seed).unwrap();
    let cfg = TrainConfig {
        history,
        ..Default::default()
    };
    let stats = ModelStats::from_episodes(&eps, cfg.kind).unwrap();
    let mut r = rng(seed);
    let spec = ModelSpec {
        dynamics_hidden: vec![8, 8],
        estimator_hidden: vec![4],
        ..Default::default()
    };
    let (mut d, _) = build_models(&spec, &stats, vec![0], &cfg, &mut r).unwrap();
    d.net = random_net(&[d.net.input_dim(), 8, 8, 2], Activation::Softplus, &mut r);
    d
}

/// Tracking problem exercising every cost term and a ground barrier.
pub fn problem<R: Rng>(d: &dyn HistoryDynamics, knots: usize, horizon: usize, kind: SplineKind, r: &mut R) -> ShootingProblem {
    let rows = d.history() + 1;
    let mut x = random_matrix(rows, 2, 0.5, 1.5, r);
    x.column_mut(1).fill(0.0);
    let u = random_matrix(rows, 1, 5.0, 15.0, r);
    let config = ProblemConfig {
        horizon,
        knots,
        spline: kind,
        costs: vec![
            CostTerm::StateTracking {
                index: 0,
                reference: (0..horizon).map(|t| 1.0 + 0.02 * t as f64).collect(),
                weight: 1.0,
                loss: ResidualLoss::PseudoHuber { delta: 0.3 },
            },
            CostTerm::ActionEffort {
                index: 0,
                reference: 9.81,
                weight: 1e-3,
                loss: ResidualLoss::Quadratic,
            },
            CostTerm::ActionRate {
                index: 0,
                weight: 1e-3,
                loss: ResidualLoss::Quadratic,
            },
            CostTerm::Terminal {
                index: 1,
                target: 0.0,
                weight: 0.5,
                loss: ResidualLoss::Quadratic,
            },
            CostTerm::TrajectoryMean {
                index: 0,
                target: 1.1,
                weight: 0.5,
                loss: ResidualLoss::Quadratic,
            },
        ],
        constraints: vec![BarrierConstraint {
            target: ConstraintTarget::State,
            index: 0,
            side: BoundSide::Lower,
            bound: 0.0,
            delta: 0.05,
            beta: 0.01,
        }],
        rollouts: 8,
        iterations: 3,
    };
    ShootingProblem {
        config,
        initial: HistoryWindow::new(x, u).unwrap(),
        initial_knots: random_matrix(knots, 1, 5.0, 15.0, r),
    }
}
