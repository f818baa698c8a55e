//! Zeroth-order baseline: a simplified annealed-Gaussian sampler with
//! softmin averaging over knot perturbations. It is not a reproduction of any
//! published diffusion-style planner.

use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::HistoryDynamics;
use crate::error::{Result, SnsError};
use crate::shooting_mpc::{evaluate_candidates, evaluate_cost, ShootingProblem, SolveReport, REPORT_SCHEMA_VERSION};

pub const SAMPLER_METHOD: &str = "annealed_gaussian_softmin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub samples: usize,
    pub iterations: usize,
    /// initial perturbation scale, per action dimension
    pub sigma: Vec<f64>,
    /// per-iteration scale factor
    pub rho: f64,
    /// softmin temperature; zero picks the best sample
    pub tau: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            samples: 128,
            iterations: 4,
            sigma: vec![1.0],
            rho: 0.5,
            tau: 0.1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, action_dim: usize) -> Result<()> {
        if self.samples == 0 {
            return Err(SnsError::InvalidInput("sampler needs at least one sample".into()));
        }
        if self.sigma.len() != action_dim {
            return Err(SnsError::dims("sampler sigma", action_dim, self.sigma.len()));
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0)) || !(self.rho > 0.0) || !(self.tau >= 0.0) {
            return Err(SnsError::InvalidInput("sampler needs σ ≥ 0, ρ > 0, τ ≥ 0".into()));
        }
        Ok(())
    }

    /// Scale used at iteration `i`.
    pub fn scale_at(&self, i: usize) -> Vec<f64> {
        let f = self.rho.powi(i as i32);
        self.sigma.iter().map(|s| s * f).collect()
    }
}

/// Softmin weights `exp(−(c−min)/τ)`, normalized; `τ = 0` is a one-hot argmin.
pub fn softmin_weights(costs: &[f64], tau: f64) -> Vec<f64> {
    let (best, min) = costs
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bc), (i, &c)| if c < bc { (i, c) } else { (bi, bc) });
    if tau == 0.0 || !min.is_finite() {
        let mut w = vec![0.0; costs.len()];
        w[best] = 1.0;
        return w;
    }
    let mut w: Vec<f64> = costs
        .iter()
        .map(|c| if c.is_finite() { (-(c - min) / tau).exp() } else { 0.0 })
        .collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    w
}

pub fn sample_solve<D: HistoryDynamics + ?Sized>(
    dynamics: &D,
    problem: &ShootingProblem,
    cfg: &SamplerConfig,
) -> Result<SolveReport> {
    let started = Instant::now();
    problem.validate(dynamics)?;
    cfg.validate(dynamics.action_dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mean = problem.initial_knots.clone();
    let mut costs = vec![evaluate_cost(dynamics, problem, &mean)?];
    let mut rollouts = 1;
    for i in 0..cfg.iterations {
        let scale = cfg.scale_at(i);
        let candidates: Vec<Array2<f64>> = (0..cfg.samples)
            .map(|_| {
                let mut c = mean.clone();
                for row in c.rows_mut() {
                    for (v, s) in row.into_iter().zip(&scale) {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v += s * z;
                    }
                }
                c
            })
            .collect();
        let sample_costs = evaluate_candidates(dynamics, problem, &candidates)?;
        rollouts += cfg.samples;
        if sample_costs.iter().all(|c| !c.is_finite()) {
            return Err(SnsError::non_finite(format!("every sample at iteration {i}")));
        }
        let w = softmin_weights(&sample_costs, cfg.tau);
        let mut next = Array2::zeros(mean.raw_dim());
        for (c, &wi) in candidates.iter().zip(&w) {
            if wi > 0.0 {
                next.scaled_add(wi, c);
            }
        }
        mean = next;
        costs.push(evaluate_cost(dynamics, problem, &mean)?);
        rollouts += 1;
    }
    Ok(SolveReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: SAMPLER_METHOD.to_string(),
        knots: mean,
        costs,
        alphas: Vec::new(),
        cholesky_status: "not_applicable".into(),
        rollouts_evaluated: rollouts,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmin_limits() {
        let c = [3.0, 1.0, 2.0];
        assert_eq!(softmin_weights(&c, 0.0), vec![0.0, 1.0, 0.0]);
        let w = softmin_weights(&c, 1e6);
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-5));
        let w = softmin_weights(&[1.0, f64::INFINITY], 0.5);
        assert_eq!(w, vec![1.0, 0.0]);
    }

    #[test]
    fn scale_anneals_geometrically() {
        let cfg = SamplerConfig {
            sigma: vec![2.0, 0.5],
            rho: 0.5,
            ..Default::default()
        };
        assert_eq!(cfg.scale_at(0), vec![2.0, 0.5]);
        assert_eq!(cfg.scale_at(3), vec![0.25, 0.0625]);
    }
}
