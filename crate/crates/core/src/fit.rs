//! Minibatch supervised fitting of a single network, with the optional
//! smoothness penalty.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnsError};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::robust_loss::LikelihoodKind;
use crate::smooth_net::{MlpParams, SmoothnessBudget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitLoss {
    /// mean of squared errors over rows and outputs
    #[default]
    Mse,
    /// targets already normalized; per-row likelihood loss
    Cauchy,
    Gaussian,
}

impl FitLoss {
    pub fn likelihood(kind: LikelihoodKind) -> Self {
        match kind {
            LikelihoodKind::Cauchy => FitLoss::Cauchy,
            LikelihoodKind::Gaussian => FitLoss::Gaussian,
        }
    }

    /// Loss of residuals `r = y − ŷ` and its gradient with respect to `r`.
    pub fn loss_and_grad(self, r: ArrayView2<f64>) -> (f64, Array2<f64>) {
        match self {
            FitLoss::Mse => {
                let n = r.len().max(1) as f64;
                let loss = r.iter().map(|v| v * v).sum::<f64>() / n;
                (loss, r.mapv(|v| 2.0 * v / n))
            }
            FitLoss::Cauchy => LikelihoodKind::Cauchy.loss_and_grad(r),
            FitLoss::Gaussian => LikelihoodKind::Gaussian.loss_and_grad(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub budget: Option<SmoothnessBudget>,
    pub loss: FitLoss,
    /// prediction is `output_scale · net(x)`
    pub output_scale: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 100,
            batch_size: 256,
            optimizer: OptimizerConfig::with_lr(0.01),
            budget: None,
            loss: FitLoss::Mse,
            output_scale: 1.0,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SnsError::Config("batch_size must be positive".into()));
        }
        if !(self.output_scale.is_finite() && self.output_scale != 0.0) {
            return Err(SnsError::Config("output_scale must be finite and nonzero".into()));
        }
        if let Some(b) = &self.budget {
            b.validate()?;
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// mean minibatch data loss over the epoch
    pub loss: f64,
    pub penalty: f64,
    pub c: f64,
    pub s: f64,
    pub lr: f64,
}

/// Loss and parameter gradient on one batch, penalty included.
pub fn batch_loss_and_grad(
    params: &MlpParams,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    cfg: &FitConfig,
) -> Result<(f64, f64, Vec<f64>)> {
    let tape = params.forward_tape(x)?;
    if tape.output.dim() != y.dim() {
        return Err(SnsError::dims("fit targets", tape.output.ncols(), y.ncols()));
    }
    let s = cfg.output_scale;
    let mut r = y.to_owned();
    Zip::from(&mut r).and(&tape.output).for_each(|rv, &o| *rv -= s * o);
    let (loss, dr) = cfg.loss.loss_and_grad(r.view());
    let d_out = dr.mapv(|v| -s * v);
    let (grads, _) = params.backward(&tape, d_out.view(), true);
    let mut grads = grads.expect("parameter gradients requested");
    let mut penalty = 0.0;
    if let Some(b) = &cfg.budget {
        let (p, dtheta) = params.smoothness_penalty_with_grad(b);
        penalty = p;
        grads.add_theta(&dtheta);
    }
    Ok((loss, penalty, grads.to_flat()))
}

/// Trains `params` in place. `on_epoch` sees the parameters after each epoch.
pub fn fit_regression<F>(
    params: &mut MlpParams,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    cfg: &FitConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&MlpParams, &EpochMetrics),
{
    cfg.validate()?;
    params.validate()?;
    if x.nrows() != y.nrows() {
        return Err(SnsError::dims("fit samples", x.nrows(), y.nrows()));
    }
    if x.nrows() == 0 {
        return Err(SnsError::InvalidInput("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer.clone(), params.num_params())?;
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut flat = params.to_flat();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches, mut penalty, mut lr) = (0.0, 0usize, 0.0, opt.current_lr());
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let (loss, pen, grad) = batch_loss_and_grad(params, xb.view(), yb.view(), cfg)?;
            if !loss.is_finite() {
                return Err(SnsError::non_finite(format!("training loss at epoch {epoch}")));
            }
            lr = opt.step(&mut flat, &grad)?;
            params.set_flat(&flat)?;
            loss_sum += loss;
            batches += 1;
            penalty = pen;
        }
        let bound = params.lipschitz_bound();
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / batches as f64,
            penalty,
            c: bound.c,
            s: bound.s,
            lr,
        };
        on_epoch(params, &m);
        history.push(m);
    }
    Ok(history)
}

/// Mean squared error of `output_scale · net(x)` against `y`.
pub fn evaluate_mse(params: &MlpParams, x: ArrayView2<f64>, y: ArrayView2<f64>, output_scale: f64) -> Result<f64> {
    let out = params.forward_batch(x)?;
    if out.dim() != y.dim() {
        return Err(SnsError::dims("evaluation targets", out.ncols(), y.ncols()));
    }
    let n = y.len().max(1) as f64;
    Ok(Zip::from(&out)
        .and(&y)
        .fold(0.0, |acc, &o, &t| acc + (t - output_scale * o).powi(2))
        / n)
}
