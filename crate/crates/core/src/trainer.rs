//! Concurrent training of the dynamics surrogate and the estimator.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::dynamics::DynamicsModel;
use crate::error::{Result, SnsError};
use crate::estimator::{EstimatorModel, HistoryWindow};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::robust_loss::{median_mad, DispersionStats, LikelihoodKind};
use crate::smooth_net::{Activation, MlpGrads, MlpParams, SmoothnessBudget, SmoothnessOrder};
use crate::tasks::{particle_step, sample_particle_start, simulate_particle_forced, Episode, ParticleConfig, ParticleState};

/// Aligned windows of `T+H+1` states, actions and measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub states: Array3<f64>,
    pub actions: Array3<f64>,
    pub measurements: Array3<f64>,
    pub seeds: Vec<u64>,
    pub horizon: usize,
    pub history: usize,
}

impl TrajectoryBatch {
    pub fn window_len(horizon: usize, history: usize) -> usize {
        horizon + history + 1
    }

    /// Windows `(episode, start)`; every index up to `start + T + H` must
    /// have a recorded action.
    pub fn from_windows(episodes: &[Episode], picks: &[(usize, usize)], horizon: usize, history: usize) -> Result<Self> {
        if horizon < 2 || history < 1 {
            return Err(SnsError::InvalidInput("batches need T ≥ 2 and H ≥ 1".into()));
        }
        let first = picks
            .first()
            .and_then(|p| episodes.get(p.0))
            .ok_or_else(|| SnsError::InvalidInput("empty batch".into()))?;
        let len = Self::window_len(horizon, history);
        let (n, m, p) = (first.states.ncols(), first.actions.ncols(), first.measurements.ncols());
        let b = picks.len();
        let mut states = Array3::zeros((b, len, n));
        let mut actions = Array3::zeros((b, len, m));
        let mut measurements = Array3::zeros((b, len, p));
        let mut seeds = Vec::with_capacity(b);
        for (bi, &(ei, start)) in picks.iter().enumerate() {
            let ep = episodes
                .get(ei)
                .ok_or_else(|| SnsError::InvalidInput(format!("episode index {ei} out of range")))?;
            if start + len > ep.len() {
                return Err(SnsError::InvalidInput(format!(
                    "window at {start} of length {len} exceeds episode of {} steps",
                    ep.len()
                )));
            }
            states.slice_mut(s![bi, .., ..]).assign(&ep.states.slice(s![start..start + len, ..]));
            actions.slice_mut(s![bi, .., ..]).assign(&ep.actions.slice(s![start..start + len, ..]));
            measurements
                .slice_mut(s![bi, .., ..])
                .assign(&ep.measurements.slice(s![start..start + len, ..]));
            seeds.push(ep.seed);
        }
        Ok(TrajectoryBatch {
            states,
            actions,
            measurements,
            seeds,
            horizon,
            history,
        })
    }

    /// `batch_size` uniformly drawn windows.
    pub fn sample<R: Rng + ?Sized>(
        episodes: &[Episode],
        batch_size: usize,
        horizon: usize,
        history: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let len = Self::window_len(horizon, history);
        let eligible: Vec<usize> = (0..episodes.len()).filter(|&i| episodes[i].len() >= len).collect();
        if eligible.is_empty() || batch_size == 0 {
            return Err(SnsError::InvalidInput("no episode is long enough for a training window".into()));
        }
        let picks: Vec<(usize, usize)> = (0..batch_size)
            .map(|_| {
                let ei = eligible[rng.random_range(0..eligible.len())];
                let start = rng.random_range(0..=episodes[ei].len() - len);
                (ei, start)
            })
            .collect();
        Self::from_windows(episodes, &picks, horizon, history)
    }

    pub fn batch_size(&self) -> usize {
        self.states.len_of(Axis(0))
    }

    fn state_window(&self, t: usize) -> ArrayView3<'_, f64> {
        self.states.slice(s![.., t..t + self.history + 1, ..])
    }

    fn action_window(&self, t: usize) -> ArrayView3<'_, f64> {
        self.actions.slice(s![.., t..t + self.history + 1, ..])
    }

    fn target(&self, t: usize) -> ArrayView2<'_, f64> {
        self.states.slice(s![.., t + self.history + 1, ..])
    }
}

/// Median/MAD and mean/STD of states, actions and one-step increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub state: DispersionStats,
    pub action: DispersionStats,
    pub increment: DispersionStats,
}

impl ModelStats {
    pub fn from_episodes(episodes: &[Episode], kind: LikelihoodKind) -> Result<Self> {
        if episodes.is_empty() {
            return Err(SnsError::InvalidInput("statistics need at least one episode".into()));
        }
        let states: Vec<ArrayView2<f64>> = episodes.iter().map(|e| e.states.view()).collect();
        let actions: Vec<ArrayView2<f64>> = episodes.iter().map(|e| e.actions.view()).collect();
        let increments: Vec<Array2<f64>> = episodes
            .iter()
            .map(|e| &e.states.slice(s![1.., ..]) - &e.states.slice(s![..-1, ..]))
            .collect();
        let inc_views: Vec<ArrayView2<f64>> = increments.iter().map(|a| a.view()).collect();
        let cat = |v: &[ArrayView2<f64>]| concatenate(Axis(0), v).map_err(|e| SnsError::InvalidInput(e.to_string()));
        Ok(ModelStats {
            state: median_mad(cat(&states)?.view())?.with_kind(kind),
            action: median_mad(cat(&actions)?.view())?.with_kind(kind),
            increment: median_mad(cat(&inc_views)?.view())?.with_kind(kind),
        })
    }
}

/// FIFO store of whole episodes. Statistics are frozen on first request.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    stats: Option<ModelStats>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(SnsError::InvalidInput("buffer capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            episodes: VecDeque::with_capacity(capacity),
            stats: None,
        })
    }

    pub fn push(&mut self, ep: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(ep);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn episodes(&self) -> Vec<Episode> {
        self.episodes.iter().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn freeze_stats(&mut self, kind: LikelihoodKind) -> Result<&ModelStats> {
        if self.stats.is_none() {
            self.stats = Some(ModelStats::from_episodes(&self.episodes(), kind)?);
        }
        Ok(self.stats.as_ref().expect("stats just set"))
    }

    pub fn stats(&self) -> Option<&ModelStats> {
        self.stats.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_step: f64,
    pub lambda_rollout: f64,
    pub lambda_corrupt: f64,
    pub lambda_sns: f64,
    pub lambda_estimator_sns: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub history: usize,
    pub batch_size: usize,
    pub dynamics_optimizer: OptimizerConfig,
    pub estimator_optimizer: OptimizerConfig,
    /// initial estimate perturbation std, in units of the increment dispersion
    pub init_perturbation: f64,
    /// half-width of uniform measurement noise
    pub measurement_noise: f64,
    pub dynamics_budget: SmoothnessBudget,
    pub estimator_budget: SmoothnessBudget,
    pub kind: LikelihoodKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_step: 0.5,
            lambda_rollout: 0.5,
            lambda_corrupt: 0.05,
            lambda_sns: 10.0,
            lambda_estimator_sns: 1e-5,
            gamma: 0.95,
            horizon: 10,
            history: 4,
            batch_size: 64,
            dynamics_optimizer: OptimizerConfig::with_lr(1e-3),
            estimator_optimizer: OptimizerConfig::with_lr(1e-3),
            init_perturbation: 0.5f64.sqrt(),
            measurement_noise: 0.01,
            dynamics_budget: SmoothnessBudget {
                order: SmoothnessOrder::First,
                budget: 1e4,
                weight: 1.0,
            },
            estimator_budget: SmoothnessBudget {
                order: SmoothnessOrder::First,
                budget: 1.0,
                weight: 1.0,
            },
            kind: LikelihoodKind::Cauchy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda_step,
            self.lambda_rollout,
            self.lambda_corrupt,
            self.lambda_sns,
            self.lambda_estimator_sns,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(SnsError::Config("loss weights must be nonnegative".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(SnsError::Config("gamma must lie in (0, 1]".into()));
        }
        if self.horizon < 2 || self.history < 1 || self.batch_size == 0 {
            return Err(SnsError::Config("need horizon ≥ 2, history ≥ 1, batch_size ≥ 1".into()));
        }
        if !(self.init_perturbation >= 0.0) || !(self.measurement_noise >= 0.0) {
            return Err(SnsError::Config("noise levels must be nonnegative".into()));
        }
        self.dynamics_budget.validate()?;
        self.estimator_budget.validate()?;
        self.dynamics_optimizer.validate()?;
        self.estimator_optimizer.validate()
    }
}

/// Network shapes for the two models of the particle task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub dynamics_hidden: Vec<usize>,
    pub estimator_hidden: Vec<usize>,
    pub activation: Activation,
    pub normalization_enabled: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            dynamics_hidden: vec![32, 32],
            estimator_hidden: vec![32],
            activation: Activation::Softplus,
            normalization_enabled: true,
        }
    }
}

/// Fresh dynamics and estimator networks for state/action/measurement dims
/// implied by `stats` and `measured`.
pub fn build_models<R: Rng + ?Sized>(
    spec: &ModelSpec,
    stats: &ModelStats,
    measured: Vec<usize>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(DynamicsModel, EstimatorModel)> {
    let (n, m) = (stats.state.dim(), stats.action.dim());
    let h = cfg.history;
    let mut dims = vec![DynamicsModel::input_dim_for(h, n, m)];
    dims.extend(&spec.dynamics_hidden);
    dims.push(n);
    let dnet = MlpParams::init(&dims, spec.activation, spec.normalization_enabled, rng)?;
    let dynamics = DynamicsModel::new(
        dnet,
        h,
        cfg.kind,
        stats.state.clone(),
        stats.action.clone(),
        stats.increment.clone(),
    )?;
    let map = crate::estimator::MeasurementMap::new(measured, n)?;
    let p = map.dim();
    let mut edims = vec![EstimatorModel::input_dim_for(h, n, m, p)];
    edims.extend(&spec.estimator_hidden);
    edims.push(EstimatorModel::output_dim_for(h, n, p));
    let mut enet = MlpParams::init(&edims, spec.activation, spec.normalization_enabled, rng)?;
    // start from the uncorrected prior
    let last = enet.layers.len() - 1;
    enet.layers[last].weight.mapv_inplace(|w| 1e-3 * w);
    enet.layers[last].bias.fill(0.0);
    let inc_scale = stats.increment.scale(cfg.kind);
    let innovation_scale = map.measured.iter().map(|&i| inc_scale[i]).collect();
    let estimator = EstimatorModel::new(
        enet,
        h,
        map,
        cfg.kind,
        stats.state.clone(),
        stats.action.clone(),
        innovation_scale,
    )?;
    Ok((dynamics, estimator))
}

/// Loss value with the dynamics-parameter gradient when requested.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Option<MlpGrads>,
}

fn stack_windows(views: &[ArrayView3<f64>]) -> Result<Array3<f64>> {
    concatenate(Axis(0), views).map_err(|e| SnsError::InvalidInput(e.to_string()))
}

fn normalized_residual(target: ArrayView2<f64>, pred: &Array2<f64>, scale: &[f64]) -> Array2<f64> {
    let mut z = target.to_owned() - pred;
    for mut r in z.rows_mut() {
        r.iter_mut().zip(scale).for_each(|(v, s)| *v /= s);
    }
    z
}

/// `d loss / d pred` from `d loss / d z` with `z = (target − pred)/scale`.
fn residual_pullback(dz: &Array2<f64>, scale: &[f64], weight: f64) -> Array2<f64> {
    let mut d = dz.clone();
    for mut r in d.rows_mut() {
        r.iter_mut().zip(scale).for_each(|(v, s)| *v *= -weight / s);
    }
    d
}

/// Mean one-step likelihood loss over all `T` transitions of the batch,
/// each predicted from its ground-truth history.
pub fn step_loss(batch: &TrajectoryBatch, model: &DynamicsModel, want_grad: bool) -> Result<LossGrad> {
    let t_len = batch.horizon;
    let xs: Vec<ArrayView3<f64>> = (0..t_len).map(|t| batch.state_window(t)).collect();
    let us: Vec<ArrayView3<f64>> = (0..t_len).map(|t| batch.action_window(t)).collect();
    let targets: Vec<ArrayView2<f64>> = (0..t_len).map(|t| batch.target(t)).collect();
    let x = stack_windows(&xs)?;
    let u = stack_windows(&us)?;
    let target = concatenate(Axis(0), &targets).map_err(|e| SnsError::InvalidInput(e.to_string()))?;
    let scale = model.output_scale();
    let (pred, tape) = model.predict_batch_tape(x.view(), u.view())?;
    let z = normalized_residual(target.view(), &pred, &scale);
    let (loss, dz) = model.kind.loss_and_grad(z.view());
    let grads = if want_grad { model.backward_batch(&tape, residual_pullback(&dz, &scale, 1.0).view(), true).0 } else { None };
    Ok(LossGrad { loss, grads })
}

/// Autoregressive rollout from the true initial history. Prediction `k`
/// (0-based) is weighted `γ^k` for `k = 1..T−1`, normalized by `T−1`;
/// gradients flow back through every fed-back prediction.
pub fn rollout_loss(batch: &TrajectoryBatch, model: &DynamicsModel, gamma: f64, want_grad: bool) -> Result<LossGrad> {
    let (t_len, h) = (batch.horizon, batch.history);
    let scale = model.output_scale();
    let mut window = batch.state_window(0).to_owned();
    let mut tapes = Vec::with_capacity(t_len);
    let mut d_direct: Vec<Option<Array2<f64>>> = Vec::with_capacity(t_len);
    let mut loss = 0.0;
    let norm = 1.0 / (t_len - 1) as f64;
    for k in 0..t_len {
        let (pred, tape) = model.predict_batch_tape(window.view(), batch.action_window(k))?;
        if k >= 1 {
            let w = gamma.powi(k as i32) * norm;
            let z = normalized_residual(batch.target(k), &pred, &scale);
            let (lk, dz) = model.kind.loss_and_grad(z.view());
            loss += w * lk;
            d_direct.push(Some(residual_pullback(&dz, &scale, w)));
        } else {
            d_direct.push(None);
        }
        let mut next = Array3::zeros(window.raw_dim());
        next.slice_mut(s![.., ..h, ..]).assign(&window.slice(s![.., 1.., ..]));
        next.slice_mut(s![.., h, ..]).assign(&pred);
        window = next;
        if want_grad {
            tapes.push(tape);
        }
    }
    if !want_grad {
        return Ok(LossGrad { loss, grads: None });
    }
    let (b, n) = (batch.batch_size(), model.state_dim);
    let mut adj = vec![Array2::<f64>::zeros((b, n)); t_len];
    let mut total = MlpGrads::zeros_like(&model.net);
    for k in (0..t_len).rev() {
        let mut d = adj[k].clone();
        if let Some(dd) = &d_direct[k] {
            d += dd;
        }
        let (g, dx, _) = model.backward_batch(&tapes[k], d.view(), true);
        total.add_assign(&g.expect("parameter gradients requested"));
        for j in 0..=h {
            // window row j of step k holds trajectory index k + j
            if k + j > h {
                let src = k + j - h - 1;
                adj[src] += &dx.slice(s![.., j, ..]);
            }
        }
    }
    Ok(LossGrad {
        loss,
        grads: Some(total),
    })
}

/// One-step loss from detached posterior windows `X̄_{t|t}`, `t = 1..T−1`.
pub fn corrupt_loss(
    batch: &TrajectoryBatch,
    model: &DynamicsModel,
    posteriors: &[Array3<f64>],
    want_grad: bool,
) -> Result<LossGrad> {
    let t_len = batch.horizon;
    if posteriors.len() != t_len - 1 {
        return Err(SnsError::dims("posterior windows", t_len - 1, posteriors.len()));
    }
    let xs: Vec<ArrayView3<f64>> = posteriors.iter().map(|p| p.view()).collect();
    let us: Vec<ArrayView3<f64>> = (1..t_len).map(|t| batch.action_window(t)).collect();
    let targets: Vec<ArrayView2<f64>> = (1..t_len).map(|t| batch.target(t)).collect();
    let x = stack_windows(&xs)?;
    let u = stack_windows(&us)?;
    let target = concatenate(Axis(0), &targets).map_err(|e| SnsError::InvalidInput(e.to_string()))?;
    let scale = model.output_scale();
    let (pred, tape) = model.predict_batch_tape(x.view(), u.view())?;
    let z = normalized_residual(target.view(), &pred, &scale);
    let (loss, dz) = model.kind.loss_and_grad(z.view());
    let grads = if want_grad { model.backward_batch(&tape, residual_pullback(&dz, &scale, 1.0).view(), true).0 } else { None };
    Ok(LossGrad { loss, grads })
}

/// Everything produced by running the filter along a batch.
#[derive(Debug, Clone)]
pub struct FilterRun {
    /// `X̄_{t|t}` for `t = 1..T−1`
    pub posteriors: Vec<Array3<f64>>,
    /// estimator data loss (without the smoothness term)
    pub loss: f64,
    pub grads: Option<MlpGrads>,
    /// mean absolute error of the newest unmeasured components
    pub prior_mae: f64,
    pub posterior_mae: f64,
}

/// Perturbed initial history `X_0 + N(0, (ρ·σ̂_D)²)`.
pub fn perturb_initial<R: Rng + ?Sized>(batch: &TrajectoryBatch, scale: &[f64], rho: f64, rng: &mut R) -> Array3<f64> {
    let mut x0 = batch.state_window(0).to_owned();
    for mut lane in x0.lanes_mut(Axis(2)) {
        for (v, s) in lane.iter_mut().zip(scale) {
            let e: f64 = StandardNormal.sample(rng);
            *v += rho * s * e;
        }
    }
    x0
}

pub fn corrupt_measurements<R: Rng + ?Sized>(y: &Array3<f64>, half_width: f64, rng: &mut R) -> Array3<f64> {
    if half_width == 0.0 {
        return y.clone();
    }
    y.mapv(|v| v + half_width * (2.0 * rng.random::<f64>() - 1.0))
}

/// Runs prediction, innovation and correction for `t = 0..T−2` from a
/// perturbed initial history. Each posterior is detached before the next
/// prediction, so only the correction network receives gradients.
pub fn run_filter<R: Rng + ?Sized>(
    batch: &TrajectoryBatch,
    dynamics: &DynamicsModel,
    estimator: &EstimatorModel,
    cfg: &TrainConfig,
    want_grad: bool,
    rng: &mut R,
) -> Result<FilterRun> {
    let (t_len, h) = (batch.horizon, batch.history);
    let (b, n) = (batch.batch_size(), dynamics.state_dim);
    let scale = dynamics.output_scale();
    let measured = &estimator.measurement.measured;
    let unmeasured = estimator.measurement.unmeasured();
    let y_noisy = corrupt_measurements(&batch.measurements, cfg.measurement_noise, rng);
    let mut post = perturb_initial(batch, &scale, cfg.init_perturbation, rng);
    let mut posteriors = Vec::with_capacity(t_len - 1);
    let mut grads = want_grad.then(|| MlpGrads::zeros_like(&estimator.net));
    let mut loss = 0.0;
    let (mut prior_err, mut post_err) = (0.0, 0.0);
    let unm_scale: Vec<f64> = unmeasured.iter().map(|&i| scale[i]).collect();
    let rows = h + 1;
    let norm = (rows as f64) / (h as f64 * (t_len - 1) as f64);
    for t in 0..t_len - 1 {
        let u = batch.action_window(t);
        let (pred, tape) = dynamics.predict_batch_tape(post.view(), u)?;
        let mut prior = Array3::zeros(post.raw_dim());
        prior.slice_mut(s![.., ..h, ..]).assign(&post.slice(s![.., 1.., ..]));
        prior.slice_mut(s![.., h, ..]).assign(&pred);
        let y = y_noisy.slice(s![.., t + 1..t + 1 + rows, ..]);
        let mut nu = Array2::zeros((b, measured.len()));
        let mut d_next = Array2::zeros((b, n));
        for bi in 0..b {
            for (k, &i) in measured.iter().enumerate() {
                nu[[bi, k]] = y[[bi, h, k]] - pred[[bi, i]];
                d_next[[bi, i]] = -2.0 * nu[[bi, k]];
            }
        }
        let (_, gx, gu) = dynamics.backward_batch(&tape, d_next.view(), false);
        let gx = gx.into_shape_with_order((b, rows * n)).map_err(|e| SnsError::InvalidInput(e.to_string()))?;
        let gu = gu
            .into_shape_with_order((b, rows * dynamics.action_dim))
            .map_err(|e| SnsError::InvalidInput(e.to_string()))?;
        let g_nu = concatenate(Axis(1), &[gx.view(), gu.view()]).map_err(|e| SnsError::InvalidInput(e.to_string()))?;
        let (posterior, etape) = estimator.correct_batch_tape(prior.view(), u, y, nu.view(), g_nu.view())?;
        let truth = batch.states.slice(s![.., t + 1..t + 1 + rows, ..]);
        // per-row residuals of the unmeasured components
        let mut z = Array2::zeros((b * rows, unmeasured.len()));
        for bi in 0..b {
            for j in 0..rows {
                for (k, &i) in unmeasured.iter().enumerate() {
                    z[[bi * rows + j, k]] = (posterior[[bi, j, i]] - truth[[bi, j, i]]) / unm_scale[k];
                }
            }
            for &i in &unmeasured {
                prior_err += (prior[[bi, h, i]] - truth[[bi, h, i]]).abs();
                post_err += (posterior[[bi, h, i]] - truth[[bi, h, i]]).abs();
            }
        }
        let (lt, dz) = estimator.kind.loss_and_grad(z.view());
        loss += norm * lt;
        if let Some(g) = grads.as_mut() {
            let mut d_post = Array3::zeros(posterior.raw_dim());
            for bi in 0..b {
                for j in 0..rows {
                    for (k, &i) in unmeasured.iter().enumerate() {
                        d_post[[bi, j, i]] = norm * dz[[bi * rows + j, k]] / unm_scale[k];
                    }
                }
            }
            g.add_assign(&estimator.backward_batch(&etape, d_post.view()));
        }
        post = posterior;
        posteriors.push(post.clone());
    }
    let count = (b * (t_len - 1) * unmeasured.len().max(1)) as f64;
    Ok(FilterRun {
        posteriors,
        loss,
        grads,
        prior_mae: prior_err / count,
        posterior_mae: post_err / count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsMetrics {
    pub step: usize,
    pub l_step: f64,
    pub l_rollout: f64,
    pub l_corrupt: f64,
    pub l_sns: f64,
    pub total: f64,
    pub c: f64,
    pub s: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,L_step,L_rollout,L_corrupt,L_sns,C,S,lr";

impl DynamicsMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.l_step, self.l_rollout, self.l_corrupt, self.l_sns, self.c, self.s, self.lr
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub step: usize,
    pub loss: f64,
    pub l_sns: f64,
    pub prior_mae: f64,
    pub posterior_mae: f64,
    pub lr: f64,
}

/// Total dynamics objective
/// `λ0·L_step + λ1·L_rollout + λ2·L_corrupt + λ3·L_SNS` and its gradient.
pub fn dynamics_objective<R: Rng + ?Sized>(
    batch: &TrajectoryBatch,
    dynamics: &DynamicsModel,
    estimator: Option<&EstimatorModel>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(DynamicsMetrics, MlpGrads)> {
    let mut grads = MlpGrads::zeros_like(&dynamics.net);
    let st = step_loss(batch, dynamics, cfg.lambda_step > 0.0)?;
    if let Some(g) = &st.grads {
        grads.add_scaled(g, cfg.lambda_step);
    }
    let ro = if cfg.lambda_rollout > 0.0 {
        rollout_loss(batch, dynamics, cfg.gamma, true)?
    } else {
        rollout_loss(batch, dynamics, cfg.gamma, false)?
    };
    if let Some(g) = &ro.grads {
        grads.add_scaled(g, cfg.lambda_rollout);
    }
    let mut l_corrupt = 0.0;
    if let (Some(est), true) = (estimator, cfg.lambda_corrupt > 0.0) {
        let run = run_filter(batch, dynamics, est, cfg, false, rng)?;
        let co = corrupt_loss(batch, dynamics, &run.posteriors, true)?;
        l_corrupt = co.loss;
        if let Some(g) = &co.grads {
            grads.add_scaled(g, cfg.lambda_corrupt);
        }
    }
    let (pen, dtheta) = dynamics.net.smoothness_penalty_with_grad(&cfg.dynamics_budget);
    let scaled: Vec<f64> = dtheta.iter().map(|d| d * cfg.lambda_sns).collect();
    grads.add_theta(&scaled);
    let total = cfg.lambda_step * st.loss + cfg.lambda_rollout * ro.loss + cfg.lambda_corrupt * l_corrupt + cfg.lambda_sns * pen;
    let bound = dynamics.net.lipschitz_bound();
    let m = DynamicsMetrics {
        step: 0,
        l_step: st.loss,
        l_rollout: ro.loss,
        l_corrupt,
        l_sns: pen,
        total,
        c: bound.c,
        s: bound.s,
        lr: 0.0,
    };
    Ok((m, grads))
}

/// Estimator objective: filter loss plus `λ4·L_SNS`.
pub fn estimator_objective<R: Rng + ?Sized>(
    batch: &TrajectoryBatch,
    dynamics: &DynamicsModel,
    estimator: &EstimatorModel,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(EstimatorMetrics, MlpGrads)> {
    let run = run_filter(batch, dynamics, estimator, cfg, true, rng)?;
    let mut grads = run.grads.expect("estimator gradients requested");
    let (pen, dtheta) = estimator.net.smoothness_penalty_with_grad(&cfg.estimator_budget);
    let scaled: Vec<f64> = dtheta.iter().map(|d| d * cfg.lambda_estimator_sns).collect();
    grads.add_theta(&scaled);
    Ok((
        EstimatorMetrics {
            step: 0,
            loss: run.loss + cfg.lambda_estimator_sns * pen,
            l_sns: pen,
            prior_mae: run.prior_mae,
            posterior_mae: run.posterior_mae,
            lr: 0.0,
        },
        grads,
    ))
}

fn apply_update(net: &mut MlpParams, opt: &mut Optimizer, grads: &MlpGrads, what: &str) -> Result<f64> {
    if !grads.is_finite() {
        return Err(SnsError::non_finite(format!("{what} gradient at step {}", opt.steps())));
    }
    let mut flat = net.to_flat();
    let lr = opt.step(&mut flat, &grads.to_flat())?;
    net.set_flat(&flat)?;
    Ok(lr)
}

/// Both models with their optimizers.
#[derive(Debug, Clone)]
pub struct ConcurrentTrainer {
    pub dynamics: DynamicsModel,
    pub estimator: EstimatorModel,
    pub config: TrainConfig,
    dyn_opt: Optimizer,
    est_opt: Optimizer,
}

impl ConcurrentTrainer {
    pub fn new(dynamics: DynamicsModel, estimator: EstimatorModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dyn_opt = Optimizer::new(config.dynamics_optimizer.clone(), dynamics.net.num_params())?;
        let est_opt = Optimizer::new(config.estimator_optimizer.clone(), estimator.net.num_params())?;
        Ok(ConcurrentTrainer {
            dynamics,
            estimator,
            config,
            dyn_opt,
            est_opt,
        })
    }

    pub fn steps(&self) -> usize {
        self.dyn_opt.steps()
    }

    /// One dynamics update on `batch`.
    pub fn train_dynamics_step<R: Rng + ?Sized>(&mut self, batch: &TrajectoryBatch, rng: &mut R) -> Result<DynamicsMetrics> {
        let step = self.dyn_opt.steps();
        let (mut m, grads) = dynamics_objective(batch, &self.dynamics, Some(&self.estimator), &self.config, rng)?;
        if !m.total.is_finite() {
            return Err(SnsError::non_finite(format!(
                "dynamics loss at step {step} (step {}, rollout {}, corrupt {})",
                m.l_step, m.l_rollout, m.l_corrupt
            )));
        }
        m.lr = apply_update(&mut self.dynamics.net, &mut self.dyn_opt, &grads, "dynamics")?;
        m.step = step;
        Ok(m)
    }

    /// One estimator update on `batch`, dynamics held fixed.
    pub fn train_estimator_step<R: Rng + ?Sized>(&mut self, batch: &TrajectoryBatch, rng: &mut R) -> Result<EstimatorMetrics> {
        let step = self.est_opt.steps();
        let (mut m, grads) = estimator_objective(batch, &self.dynamics, &self.estimator, &self.config, rng)?;
        if !m.loss.is_finite() {
            return Err(SnsError::non_finite(format!("estimator loss at step {step}")));
        }
        m.lr = apply_update(&mut self.estimator.net, &mut self.est_opt, &grads, "estimator")?;
        m.step = step;
        Ok(m)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<M> {
    pub format_version: u32,
    pub config_hash: String,
    pub step: usize,
    pub model: M,
}

pub fn save_checkpoint<M: Serialize>(path: &Path, model: &M, config_hash: &str, step: usize) -> Result<()> {
    let ck = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        step,
        model,
    };
    std::fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint<M: DeserializeOwned>(path: &Path) -> Result<Checkpoint<M>> {
    let ck: Checkpoint<M> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if ck.format_version != CHECKPOINT_VERSION {
        return Err(SnsError::InvalidInput(format!(
            "unsupported checkpoint version {}",
            ck.format_version
        )));
    }
    Ok(ck)
}

pub fn write_metrics_csv<W: Write>(rows: &[DynamicsMetrics], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Chooses actions from the current posterior in closed loop.
pub trait Controller {
    fn act(&mut self, posterior: &HistoryWindow, step: usize) -> Result<Array1<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub episodes: usize,
    pub measurement_noise: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            episodes: 10,
            measurement_noise: 0.01,
        }
    }
}

/// Runs particle episodes and appends them to `buffer`. Without a
/// controller the episodes use the sinusoidal forcing of the offline
/// dataset. With one, the first `H+1` steps apply the nominal zero action,
/// after which the controller acts on the filtered history.
pub fn closed_loop_collect<R: Rng + ?Sized>(
    env: &ParticleConfig,
    models: Option<(&DynamicsModel, &EstimatorModel)>,
    controller: Option<&mut dyn Controller>,
    buffer: &mut ReplayBuffer,
    cfg: &CollectConfig,
    rng: &mut R,
) -> Result<()> {
    env.validate()?;
    let mut controller = controller;
    for _ in 0..cfg.episodes {
        let (start, omega) = sample_particle_start(env, rng);
        let seed = rng.random::<u64>();
        let ep = match (controller.as_deref_mut(), models) {
            (Some(ctrl), Some((dynamics, estimator))) => {
                run_controlled_episode(env, start, dynamics, estimator, ctrl, cfg.measurement_noise, seed, rng)?
            }
            (Some(_), None) => {
                return Err(SnsError::InvalidInput("closed-loop control needs dynamics and estimator".into()))
            }
            (None, _) => simulate_particle_forced(env, start, omega, seed),
        };
        buffer.push(ep);
    }
    Ok(())
}

/// Actions `u_{from..to}` as rows, zero before the episode start.
fn padded_actions(actions: &Array2<f64>, from: isize, to: isize) -> Array2<f64> {
    let m = actions.ncols();
    let mut out = Array2::zeros(((to - from) as usize, m));
    for (j, idx) in (from..to).enumerate() {
        if idx >= 0 {
            out.row_mut(j).assign(&actions.row(idx as usize));
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn run_controlled_episode<R: Rng + ?Sized>(
    env: &ParticleConfig,
    start: ParticleState,
    dynamics: &DynamicsModel,
    estimator: &EstimatorModel,
    ctrl: &mut dyn Controller,
    noise: f64,
    seed: u64,
    rng: &mut R,
) -> Result<Episode> {
    let steps = env.steps_per_episode();
    let h = dynamics.history;
    let rows = h + 1;
    let mut states = Array2::zeros((steps + 1, 2));
    let mut actions = Array2::zeros((steps, 1));
    let mut noisy = Array2::zeros((steps + 1, 1));
    let mut s = start;
    let mut record = |t: usize, s: ParticleState, states: &mut Array2<f64>, noisy: &mut Array2<f64>| {
        states[[t, 0]] = s.q;
        states[[t, 1]] = s.v;
        noisy[[t, 0]] = s.q + noise * (2.0 * rng.random::<f64>() - 1.0);
    };
    record(0, s, &mut states, &mut noisy);
    // X̄_{t|t}; the action rows end at u_{t-1}
    let mut posterior: Option<HistoryWindow> = None;
    for t in 0..steps {
        let ti = t as isize;
        let u = match &posterior {
            Some(post) => ctrl.act(post, t)?[0],
            None => 0.0,
        };
        actions[[t, 0]] = u;
        s = particle_step(s, u, env);
        record(t + 1, s, &mut states, &mut noisy);
        if let Some(post) = posterior.take() {
            let prev = HistoryWindow::new(post.x, padded_actions(&actions, ti - h as isize, ti + 1))?;
            let y_hist = noisy.slice(s![t + 1 - h..t + 2, ..]);
            let (prior, nu, g_nu) =
                crate::estimator::innovation(noisy.row(t + 1), &prev, dynamics, &estimator.measurement)?;
            let corrected = estimator.correct(&prior, y_hist, nu.view(), g_nu.view())?;
            posterior = Some(HistoryWindow::new(
                corrected.x,
                padded_actions(&actions, ti + 1 - rows as isize, ti + 1),
            )?);
        } else if t + 1 == h {
            // bootstrap from measured heights and finite-difference velocities
            let mut x = Array2::zeros((rows, 2));
            for j in 0..rows {
                x[[j, 0]] = noisy[[j, 0]];
            }
            for j in 1..rows {
                x[[j, 1]] = (noisy[[j, 0]] - noisy[[j - 1, 0]]) / env.dt;
            }
            x[[0, 1]] = x[[1.min(h), 1]];
            posterior = Some(HistoryWindow::new(
                x,
                padded_actions(&actions, ti + 1 - rows as isize, ti + 1),
            )?);
        }
    }
    let measurements = states.slice(s![.., 0..1]).to_owned();
    Ok(Episode {
        states,
        actions,
        measurements,
        seed,
    })
}
