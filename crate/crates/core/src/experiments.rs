//! Experiment runners behind the `sns` binary: function fitting, the
//! particle training pipeline, MPC comparisons and residual reports.
//! Every run writes CSV metrics, JSON reports and a manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{DynamicsModel, HistoryDynamics};
use crate::error::{Result, SnsError};
use crate::estimator::HistoryWindow;
use crate::fit::{fit_regression, EpochMetrics, FitConfig, FitLoss};
use crate::linalg::{inf_norm, spectral_norm};
use crate::optim::OptimizerConfig;
use crate::robust_loss::{fit_residual_report, median_mad, write_residual_report, LikelihoodKind, ResidualFit};
use crate::sampling_baseline::{sample_solve, SamplerConfig};
use crate::shooting_mpc::{
    mpc_solve, warm_start, BarrierConstraint, BoundSide, ConstraintTarget, CostTerm, ProblemConfig, ResidualLoss,
    ShootingProblem, SolveReport, SplineControl, SplineKind,
};
use crate::smooth_net::{Activation, InputBox, MlpParams, SmoothnessBudget, SmoothnessOrder};
use crate::tasks::{
    generate_particle_dataset, particle_step, piecewise_fn, relu_target, sample_fn_dataset, shape_interp_dataset,
    total_transitions, write_dataset, Episode, ParticleConfig, ParticleState,
};
use crate::trainer::{
    build_models, load_checkpoint, run_filter, save_checkpoint, write_metrics_csv, ConcurrentTrainer, Controller,
    DynamicsMetrics, EstimatorMetrics, ModelSpec, ReplayBuffer, TrainConfig, TrajectoryBatch,
};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const FIT_METRICS_HEADER: &str = "epoch,loss,mse,penalty,C,S,empirical_lipschitz,lr";
pub const ESTIMATOR_METRICS_HEADER: &str = "step,loss,L_sns,prior_mae,posterior_mae,lr";
pub const HISTOGRAM_HEADER: &str = "bin_lo,bin_hi,count";
pub const COMPARISON_HEADER: &str =
    "method,knots,rollouts,iterations,seed,cumulative_cost,mean_abs_error,success,monotone_violations";
pub const TIMINGS_HEADER: &str = "method,knots,rollouts,iterations,seed,mean_solve_s,max_solve_s";

/// All experiment settings; each verb reads its own section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub fit: FitExperiment,
    pub particle: ParticleExperiment,
    pub mpc: MpcCompareExperiment,
    pub residual: ResidualExperiment,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SnsError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SnsError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Independent stream `k` derived from the run seed.
pub fn sub_seed(seed: u64, k: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r.random()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    verb: &'a str,
    package_version: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a ExperimentConfig,
    outputs: Vec<String>,
}

fn write_manifest(out: &Path, verb: &str, cfg: &ExperimentConfig, outputs: &[&str]) -> Result<()> {
    let m = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        verb,
        package_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&out.join("manifest.json"), &m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn csv_file(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitTask {
    #[default]
    Relu,
    Piecewise,
    ShapeInterp,
    ParticleOnestep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub normalization_enabled: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            hidden: vec![64; 4],
            activation: Activation::Softplus,
            normalization_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitExperiment {
    pub task: FitTask,
    pub network: NetworkSpec,
    pub training: FitConfig,
    /// training samples for the 1-D tasks, per shape for `shape_interp`
    pub samples: usize,
    pub holdout: usize,
    /// input range of the 1-D tasks; task default when absent
    pub range: Option<[f64; 2]>,
    /// particle task: fit normalized targets under this likelihood instead of `training.loss`
    pub likelihood: Option<LikelihoodKind>,
    pub env: ParticleConfig,
    pub trajectories: usize,
    pub holdout_trajectories: usize,
    /// fraction of training targets hit by heavy-tailed noise
    pub outlier_fraction: f64,
    /// outlier Cauchy scale, in units of the clean target MAD
    pub outlier_scale: f64,
    /// pairs per epoch for the logged empirical Lipschitz estimate
    pub lipschitz_pairs: usize,
    /// pairs for the final estimate
    pub final_lipschitz_pairs: usize,
    pub jacobian_samples: usize,
    pub grid_points: usize,
    /// evaluate metrics every this many epochs, and always at the last one
    pub log_every: usize,
}

impl Default for FitExperiment {
    fn default() -> Self {
        FitExperiment {
            task: FitTask::Relu,
            network: NetworkSpec::default(),
            training: FitConfig {
                epochs: 3000,
                batch_size: 256,
                optimizer: OptimizerConfig::with_lr(0.01),
                budget: Some(SmoothnessBudget {
                    order: SmoothnessOrder::First,
                    budget: 1.0,
                    weight: 0.1,
                }),
                ..Default::default()
            },
            samples: 15_000,
            holdout: 2000,
            range: None,
            likelihood: None,
            env: ParticleConfig::default(),
            trajectories: 500,
            holdout_trajectories: 50,
            outlier_fraction: 0.0,
            outlier_scale: 10.0,
            lipschitz_pairs: 500,
            final_lipschitz_pairs: 10_000,
            jacobian_samples: 2000,
            grid_points: 801,
            log_every: 1,
        }
    }
}

impl FitTask {
    pub fn default_range(self) -> [f64; 2] {
        match self {
            FitTask::Relu => [-2.0, 2.0],
            FitTask::Piecewise => [-5.0, 5.0],
            FitTask::ShapeInterp => [-1.0, 1.0],
            FitTask::ParticleOnestep => [0.0, 4.0],
        }
    }
}

/// Train/holdout inputs and targets of a fitting task.
#[derive(Debug, Clone)]
pub struct FitData {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub x_test: Array2<f64>,
    pub y_test: Array2<f64>,
    /// box the Lipschitz probes sample from
    pub region: InputBox,
}

fn column(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((n, 1), v).expect("column shape")
}

/// Rows `(q, v, u)` and increments `x_{t+1} − x_t`.
pub fn particle_transitions(episodes: &[Episode]) -> (Array2<f64>, Array2<f64>) {
    let n = total_transitions(episodes);
    let mut x = Array2::zeros((n, 3));
    let mut y = Array2::zeros((n, 2));
    let mut row = 0;
    for ep in episodes {
        for t in 0..ep.actions.nrows() {
            x[[row, 0]] = ep.states[[t, 0]];
            x[[row, 1]] = ep.states[[t, 1]];
            x[[row, 2]] = ep.actions[[t, 0]];
            for d in 0..2 {
                y[[row, d]] = ep.states[[t + 1, d]] - ep.states[[t, d]];
            }
            row += 1;
        }
    }
    (x, y)
}

fn bounding_box(x: &Array2<f64>) -> InputBox {
    let lo = x.fold_axis(Axis(0), f64::INFINITY, |a, b| a.min(*b)).to_vec();
    let hi = x.fold_axis(Axis(0), f64::NEG_INFINITY, |a, b| a.max(*b)).to_vec();
    InputBox { lo, hi }
}

pub fn fit_data(exp: &FitExperiment, seed: u64) -> Result<FitData> {
    let [lo, hi] = exp.range.unwrap_or(exp.task.default_range());
    let one_d = |f: fn(f64) -> f64| {
        let (xs, ys) = sample_fn_dataset(f, exp.samples, (lo, hi), sub_seed(seed, 1));
        let (xt, yt) = sample_fn_dataset(f, exp.holdout, (lo, hi), sub_seed(seed, 2));
        FitData {
            x: column(xs),
            y: column(ys),
            x_test: column(xt),
            y_test: column(yt),
            region: InputBox::cube(1, lo, hi),
        }
    };
    Ok(match exp.task {
        FitTask::Relu => one_d(relu_target),
        FitTask::Piecewise => one_d(piecewise_fn),
        FitTask::ShapeInterp => {
            let (x, y) = shape_interp_dataset(exp.samples, sub_seed(seed, 1));
            let (x_test, y_test) = shape_interp_dataset(exp.holdout.div_ceil(2), sub_seed(seed, 2));
            FitData {
                x,
                y,
                x_test,
                y_test,
                region: InputBox {
                    lo: vec![lo, lo, 0.0],
                    hi: vec![hi, hi, 1.0],
                },
            }
        }
        FitTask::ParticleOnestep => {
            let train = generate_particle_dataset(&exp.env, exp.trajectories, sub_seed(seed, 1))?;
            let test = generate_particle_dataset(&exp.env, exp.holdout_trajectories, sub_seed(seed, 2))?;
            let (x, y) = particle_transitions(&train);
            let (x_test, y_test) = particle_transitions(&test);
            let region = bounding_box(&x);
            FitData {
                x,
                y,
                x_test,
                y_test,
                region,
            }
        }
    })
}

/// Standard Cauchy draws at `scale · mad_d` added to a `fraction` of rows.
pub fn contaminate<R: Rng + ?Sized>(y: &mut Array2<f64>, fraction: f64, scale: f64, rng: &mut R) -> Result<usize> {
    if fraction <= 0.0 {
        return Ok(0);
    }
    let mad = median_mad(y.view())?.mad;
    let mut hit = 0;
    for mut row in y.rows_mut() {
        if rng.random::<f64>() < fraction {
            hit += 1;
            for (v, m) in row.iter_mut().zip(&mad) {
                let u: f64 = rng.random();
                *v += scale * m.max(1e-8) * (std::f64::consts::PI * (u - 0.5)).tan();
            }
        }
    }
    Ok(hit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub task: FitTask,
    pub epochs_completed: usize,
    pub aborted: Option<String>,
    pub train_mse: f64,
    pub test_mse: f64,
    /// test MAE per output over the test target standard deviation
    pub test_normalized_mae: Vec<f64>,
    /// median over test rows of the mean normalized absolute error
    pub test_median_error: f64,
    pub c: f64,
    pub s: f64,
    pub jac_bound: f64,
    pub empirical_lipschitz: f64,
    pub max_jacobian_2norm: f64,
    pub max_jacobian_inf_norm: f64,
    pub outliers: usize,
}

/// Output affine map: prediction `= loc + scale ⊙ net(x)`.
struct OutputMap {
    loc: Vec<f64>,
    scale: Vec<f64>,
}

impl OutputMap {
    fn apply(&self, out: &Array2<f64>) -> Array2<f64> {
        let mut p = out.clone();
        for mut row in p.rows_mut() {
            for (d, v) in row.iter_mut().enumerate() {
                *v = self.loc[d] + self.scale[d] * *v;
            }
        }
        p
    }
}

fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(|v| v * v).mean().unwrap_or(f64::NAN)
}

/// Trains the configured net and writes `metrics.csv`, `eval_grid.csv`,
/// `model.json`, `report.json` and `manifest.json` under `out`.
pub fn run_fit(cfg: &ExperimentConfig, out: &Path) -> Result<FitSummary> {
    let exp = &cfg.fit;
    if exp.samples == 0 || exp.holdout == 0 || exp.grid_points < 2 || exp.log_every == 0 {
        return Err(SnsError::Config("fit needs samples, holdout, grid_points ≥ 2 and log_every ≥ 1".into()));
    }
    if !(0.0..=1.0).contains(&exp.outlier_fraction) {
        return Err(SnsError::Config("outlier_fraction must lie in [0, 1]".into()));
    }
    exp.training.validate().map_err(|e| SnsError::Config(e.to_string()))?;
    if exp.task == FitTask::ParticleOnestep {
        exp.env.validate()?;
    }
    create_out(out)?;
    let seed = cfg.seed;
    let data = fit_data(exp, seed)?;
    let mut y_train = data.y.clone();
    let outliers = contaminate(
        &mut y_train,
        exp.outlier_fraction,
        exp.outlier_scale,
        &mut ChaCha8Rng::seed_from_u64(sub_seed(seed, 3)),
    )?;

    let mut training = exp.training.clone();
    training.seed = sub_seed(seed, 4);
    let (targets, map) = match exp.likelihood {
        Some(kind) if exp.task == FitTask::ParticleOnestep => {
            let stats = median_mad(y_train.view())?.with_kind(kind);
            let (loc, scale) = (stats.location(kind).to_vec(), stats.scale(kind));
            let mut z = y_train.clone();
            for mut row in z.rows_mut() {
                for (d, v) in row.iter_mut().enumerate() {
                    *v = (*v - loc[d]) / scale[d];
                }
            }
            training.loss = FitLoss::likelihood(kind);
            training.output_scale = 1.0;
            (z, OutputMap { loc, scale })
        }
        Some(_) => return Err(SnsError::Config("likelihood fits are only defined for particle_onestep".into())),
        None => {
            let k = data.y.ncols();
            if exp.task == FitTask::ParticleOnestep {
                // x_{t+1} ≈ x_t + f(x_t, u_t)·dt
                training.output_scale = exp.env.dt;
            }
            let s = training.output_scale;
            (y_train.clone(), OutputMap { loc: vec![0.0; k], scale: vec![s; k] })
        }
    };

    let mut dims = vec![data.x.ncols()];
    dims.extend(&exp.network.hidden);
    dims.push(data.y.ncols());
    let mut init_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 5));
    let mut params = MlpParams::init(&dims, exp.network.activation, exp.network.normalization_enabled, &mut init_rng)?;

    let eval_rows = data.x.nrows().min(4096);
    let x_eval = data.x.slice(s![..eval_rows, ..]).to_owned();
    let y_eval = data.y.slice(s![..eval_rows, ..]).to_owned();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 6));
    let mut metrics = csv_file(&out.join("metrics.csv"), FIT_METRICS_HEADER)?;
    let last_epoch = training.epochs.saturating_sub(1);
    let mut logged = 0usize;
    let mut log_err: Option<SnsError> = None;
    let result = fit_regression(&mut params, data.x.view(), targets.view(), &training, |p, m: &EpochMetrics| {
        logged = m.epoch + 1;
        if m.epoch % exp.log_every != 0 && m.epoch != last_epoch {
            return;
        }
        let pred = p.forward_batch(x_eval.view()).map(|o| map.apply(&o));
        let lip = p.empirical_lipschitz(&data.region, exp.lipschitz_pairs.max(1), &mut probe_rng);
        let row = match (pred, lip) {
            (Ok(pred), Ok(lip)) => writeln!(
                metrics,
                "{},{},{},{},{},{},{},{}",
                m.epoch,
                m.loss,
                mse(&pred, &y_eval),
                m.penalty,
                m.c,
                m.s,
                lip.max(),
                m.lr
            )
            .map_err(SnsError::from),
            (Err(e), _) | (_, Err(e)) => Err(e),
        };
        if let (Err(e), None) = (row, &log_err) {
            log_err = Some(e);
        }
    });
    metrics.flush()?;
    drop(metrics);
    if let Some(e) = log_err {
        return Err(e);
    }
    let aborted = match result {
        Ok(_) => None,
        Err(e @ SnsError::NonFinite { .. }) => {
            let summary = abort_summary(exp.task, logged, e.to_string(), outliers);
            write_json(&out.join("report.json"), &summary)?;
            write_manifest(out, "fit", cfg, &["metrics.csv", "report.json"])?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };

    let predict = |x: &Array2<f64>| -> Result<Array2<f64>> { Ok(map.apply(&params.forward_batch(x.view())?)) };
    let train_pred = predict(&data.x)?;
    let test_pred = predict(&data.x_test)?;
    let test_stats = median_mad(data.y_test.view())?;
    let abs_err = (&test_pred - &data.y_test).mapv(f64::abs);
    let k = data.y.ncols();
    let norm: Vec<f64> = test_stats.std.iter().map(|m| m.max(1e-8)).collect();
    let test_normalized_mae = (0..k).map(|d| abs_err.column(d).mean().unwrap_or(f64::NAN) / norm[d]).collect();
    let mut per_row: Vec<f64> = abs_err
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(&norm).map(|(e, n)| e / n).sum::<f64>() / k as f64)
        .collect();
    let test_median_error = crate::robust_loss::lower_median(&mut per_row);

    let bound = params.lipschitz_bound();
    let lip = params.empirical_lipschitz(&data.region, exp.final_lipschitz_pairs.max(1), &mut probe_rng)?;
    let jac_rows = data.x_test.nrows().min(exp.jacobian_samples.max(1));
    let mut pick_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 7));
    let picks: Vec<usize> = (0..jac_rows).map(|_| pick_rng.random_range(0..data.x_test.nrows())).collect();
    let jac = params.input_jacobians(data.x_test.select(Axis(0), &picks).view())?;
    let max_jacobian_2norm = jac.iter().map(|j| spectral_norm(j.view())).fold(0.0, f64::max);
    let max_jacobian_inf_norm = jac.iter().map(|j| inf_norm(j.view())).fold(0.0, f64::max);

    write_eval_grid(&out.join("eval_grid.csv"), &params, &map, &data, exp)?;
    save_checkpoint(&out.join("model.json"), &params, &cfg.hash(), training.epochs)?;
    let summary = FitSummary {
        task: exp.task,
        epochs_completed: training.epochs,
        aborted,
        train_mse: mse(&train_pred, &data.y),
        test_mse: mse(&test_pred, &data.y_test),
        test_normalized_mae,
        test_median_error,
        c: bound.c,
        s: bound.s,
        jac_bound: bound.jac_bound,
        empirical_lipschitz: lip.max(),
        max_jacobian_2norm,
        max_jacobian_inf_norm,
        outliers,
    };
    write_json(&out.join("report.json"), &summary)?;
    write_manifest(
        out,
        "fit",
        cfg,
        &["metrics.csv", "eval_grid.csv", "model.json", "report.json"],
    )?;
    Ok(summary)
}

fn abort_summary(task: FitTask, epochs: usize, why: String, outliers: usize) -> FitSummary {
    FitSummary {
        task,
        epochs_completed: epochs,
        aborted: Some(why),
        train_mse: f64::NAN,
        test_mse: f64::NAN,
        test_normalized_mae: Vec::new(),
        test_median_error: f64::NAN,
        c: f64::NAN,
        s: f64::NAN,
        jac_bound: f64::NAN,
        empirical_lipschitz: f64::NAN,
        max_jacobian_2norm: f64::NAN,
        max_jacobian_inf_norm: f64::NAN,
        outliers,
    }
}

/// Sweep of input 0 across the region with the other inputs at their mean:
/// inputs, predictions and central first/second differences per output.
fn write_eval_grid(path: &Path, params: &MlpParams, map: &OutputMap, data: &FitData, exp: &FitExperiment) -> Result<()> {
    let d_in = data.x.ncols();
    let k = data.y.ncols();
    let mean = data.x.mean_axis(Axis(0)).expect("nonempty inputs");
    let (lo, hi) = (data.region.lo[0], data.region.hi[0]);
    let h = 1e-3 * (hi - lo).max(1e-12);
    let g = exp.grid_points;
    let mut pts = Array2::zeros((3 * g, d_in));
    for i in 0..g {
        let x0 = lo + (hi - lo) * i as f64 / (g - 1) as f64;
        for (j, dx) in [-h, 0.0, h].into_iter().enumerate() {
            let mut row = mean.clone();
            row[0] = x0 + dx;
            pts.row_mut(3 * i + j).assign(&row);
        }
    }
    let pred = map.apply(&params.forward_batch(pts.view())?);
    let mut header: Vec<String> = (0..d_in).map(|j| format!("x{j}")).collect();
    for o in 0..k {
        header.extend([format!("y{o}"), format!("dy{o}"), format!("d2y{o}")]);
    }
    let mut w = csv_file(path, &header.join(","))?;
    for i in 0..g {
        let mut fields: Vec<String> = pts.row(3 * i + 1).iter().map(|v| v.to_string()).collect();
        for o in 0..k {
            let (fm, f0, fp) = (pred[[3 * i, o]], pred[[3 * i + 1, o]], pred[[3 * i + 2, o]]);
            fields.push(f0.to_string());
            fields.push(((fp - fm) / (2.0 * h)).to_string());
            fields.push(((fp - 2.0 * f0 + fm) / (h * h)).to_string());
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Height-tracking task for the particle: follow
/// `base + amplitude·sin(2π t/period + phase)` while paying for thrust away
/// from hover and for thrust changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingTask {
    pub steps: usize,
    pub base_height: f64,
    pub amplitude: f64,
    pub period_s: f64,
    pub start_height: [f64; 2],
    pub track_weight: f64,
    pub track_loss: ResidualLoss,
    pub effort_weight: f64,
    pub rate_weight: f64,
    pub ground_delta: f64,
    pub ground_beta: f64,
    /// mean absolute height error over the second half for success
    pub success_tolerance: f64,
}

impl Default for TrackingTask {
    fn default() -> Self {
        TrackingTask {
            steps: 100,
            base_height: 1.5,
            amplitude: 0.5,
            period_s: 2.0,
            start_height: [1.0, 2.0],
            track_weight: 1.0,
            track_loss: ResidualLoss::Quadratic,
            effort_weight: 1e-4,
            rate_weight: 1e-4,
            ground_delta: 0.05,
            ground_beta: 1e-3,
            success_tolerance: 0.1,
        }
    }
}

impl TrackingTask {
    pub fn reference(&self, step: usize, dt: f64, phase: f64) -> f64 {
        let t = step as f64 * dt;
        self.base_height + self.amplitude * (2.0 * std::f64::consts::PI * t / self.period_s + phase).sin()
    }

    /// Shooting problem from `initial` at closed-loop step `step`.
    pub fn problem(
        &self,
        env: &ParticleConfig,
        horizon: usize,
        knots: usize,
        spline: SplineKind,
        step: usize,
        phase: f64,
        initial: HistoryWindow,
        initial_knots: Array2<f64>,
    ) -> ShootingProblem {
        let reference = (1..=horizon).map(|k| self.reference(step + k, env.dt, phase)).collect();
        let config = ProblemConfig {
            horizon,
            knots,
            spline,
            costs: vec![
                CostTerm::StateTracking {
                    index: 0,
                    reference,
                    weight: self.track_weight,
                    loss: self.track_loss,
                },
                CostTerm::ActionEffort {
                    index: 0,
                    reference: env.g,
                    weight: self.effort_weight,
                    loss: ResidualLoss::Quadratic,
                },
                CostTerm::ActionRate {
                    index: 0,
                    weight: self.rate_weight,
                    loss: ResidualLoss::Quadratic,
                },
            ],
            constraints: vec![BarrierConstraint {
                target: ConstraintTarget::State,
                index: 0,
                side: BoundSide::Lower,
                bound: 0.0,
                delta: self.ground_delta,
                beta: self.ground_beta,
            }],
            rollouts: 16,
            iterations: 1,
        };
        ShootingProblem {
            config,
            initial,
            initial_knots,
        }
    }

    /// Realized stage cost of one closed-loop transition.
    pub fn stage_cost(&self, env: &ParticleConfig, q_next: f64, reference: f64, u: f64, u_prev: f64) -> f64 {
        self.track_weight * self.track_loss.value(q_next - reference)
            + self.effort_weight * 0.5 * (u - env.g).powi(2)
            + self.rate_weight * 0.5 * (u - u_prev).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum SolverChoice {
    Ggn { rollouts: usize, iterations: usize },
    Sampler(SamplerConfig),
}

impl SolverChoice {
    pub fn label(&self) -> (&'static str, usize, usize) {
        match self {
            SolverChoice::Ggn { rollouts, iterations } => ("ggn", *rollouts, *iterations),
            SolverChoice::Sampler(c) => ("sampler", c.samples, c.iterations),
        }
    }

    fn solve<D: HistoryDynamics + ?Sized>(&self, d: &D, mut p: ShootingProblem, step_seed: u64) -> Result<SolveReport> {
        match self {
            SolverChoice::Ggn { rollouts, iterations } => {
                p.config.rollouts = *rollouts;
                p.config.iterations = *iterations;
                mpc_solve(d, &p)
            }
            SolverChoice::Sampler(c) => {
                let mut c = c.clone();
                c.seed = step_seed;
                sample_solve(d, &p, &c)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingOutcome {
    pub cumulative_cost: f64,
    pub mean_abs_error: f64,
    pub success: bool,
    pub monotone_violations: usize,
    pub solve_times: Vec<f64>,
    pub heights: Vec<f64>,
    pub references: Vec<f64>,
}

/// One closed-loop tracking episode on the true particle with full-state
/// history feedback; the planner uses `dynamics`.
#[allow(clippy::too_many_arguments)]
pub fn run_tracking_episode<D: HistoryDynamics + ?Sized>(
    env: &ParticleConfig,
    task: &TrackingTask,
    dynamics: &D,
    solver: &SolverChoice,
    horizon: usize,
    knots: usize,
    spline: SplineKind,
    seed: u64,
) -> Result<TrackingOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = task.start_height;
    let q0 = lo + (hi - lo) * rng.random::<f64>();
    let phase = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    let rows = dynamics.history() + 1;
    let mut window = HistoryWindow::new(
        Array2::from_shape_fn((rows, 2), |(_, j)| if j == 0 { q0 } else { 0.0 }),
        Array2::from_elem((rows, 1), env.g),
    )?;
    let mut state = ParticleState { q: q0, v: 0.0 };
    let mut prev: Option<SplineControl> = None;
    let mut u_prev = env.g;
    let mut out = TrackingOutcome {
        cumulative_cost: 0.0,
        mean_abs_error: 0.0,
        success: true,
        monotone_violations: 0,
        solve_times: Vec::with_capacity(task.steps),
        heights: Vec::with_capacity(task.steps),
        references: Vec::with_capacity(task.steps),
    };
    for t in 0..task.steps {
        let init_knots = match &prev {
            Some(c) => warm_start(c),
            None => Array2::from_elem((knots, 1), env.g),
        };
        let problem = task.problem(env, horizon, knots, spline, t, phase, window.clone(), init_knots);
        let rep = solver.solve(dynamics, problem, sub_seed(seed, t as u64 + 1))?;
        if matches!(solver, SolverChoice::Ggn { .. }) && !rep.is_monotone() {
            out.monotone_violations += 1;
        }
        out.solve_times.push(rep.wall_time_s);
        let ctrl = SplineControl::new(rep.knots, horizon, spline)?;
        let u = ctrl.eval(0)?[0];
        state = particle_step(state, u, env);
        let r = task.reference(t + 1, env.dt, phase);
        out.cumulative_cost += task.stage_cost(env, state.q, r, u, u_prev);
        out.heights.push(state.q);
        out.references.push(r);
        window = window.roll_action(Array1::from(vec![u]).view())?;
        window = window.roll(Array1::from(vec![state.q, state.v]).view())?;
        u_prev = u;
        prev = Some(ctrl);
    }
    let half = task.steps / 2;
    let tail: Vec<f64> = out.heights[half..]
        .iter()
        .zip(&out.references[half..])
        .map(|(q, r)| (q - r).abs())
        .collect();
    out.mean_abs_error = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    out.success = out.cumulative_cost.is_finite() && out.mean_abs_error < task.success_tolerance;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSettings {
    pub horizon: usize,
    pub knots: usize,
    pub spline: SplineKind,
    pub rollouts: usize,
    pub iterations: usize,
}

impl Default for MpcSettings {
    fn default() -> Self {
        MpcSettings {
            horizon: 25,
            knots: 5,
            spline: SplineKind::Linear,
            rollouts: 16,
            iterations: 1,
        }
    }
}

/// Closed-loop collection schedule for the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectSchedule {
    pub rounds: usize,
    pub episodes_per_round: usize,
    pub steps_per_round: usize,
    pub mpc: MpcSettings,
    pub task: TrackingTask,
}

impl Default for CollectSchedule {
    fn default() -> Self {
        CollectSchedule {
            rounds: 0,
            episodes_per_round: 4,
            steps_per_round: 200,
            mpc: MpcSettings::default(),
            task: TrackingTask::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleExperiment {
    pub env: ParticleConfig,
    pub trajectories: usize,
    pub holdout_trajectories: usize,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub measured: Vec<usize>,
    pub train_steps: usize,
    pub log_every: usize,
    pub replay_capacity: usize,
    pub collect: CollectSchedule,
    pub jacobian_samples: usize,
    pub histogram_bins: usize,
    pub eval_windows: usize,
    pub write_dataset: bool,
}

impl Default for ParticleExperiment {
    fn default() -> Self {
        ParticleExperiment {
            env: ParticleConfig::default(),
            trajectories: 500,
            holdout_trajectories: 50,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            measured: vec![0],
            train_steps: 2000,
            log_every: 10,
            replay_capacity: 10_000,
            collect: CollectSchedule::default(),
            jacobian_samples: 1000,
            histogram_bins: 20,
            eval_windows: 256,
            write_dataset: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleReport {
    pub transitions: usize,
    pub holdout_transitions: usize,
    pub train_steps: usize,
    pub collected_episodes: usize,
    pub one_step_mae: Vec<f64>,
    pub rollout_mae: Vec<f64>,
    pub jacobian_norm_max: f64,
    pub jacobian_histogram: Vec<(f64, f64, usize)>,
    pub estimator_prior_mae: f64,
    pub estimator_posterior_mae: f64,
    pub c: f64,
    pub s: f64,
}

/// MPC acting on the estimator's posterior.
pub struct MpcController<'a> {
    pub dynamics: &'a DynamicsModel,
    pub env: ParticleConfig,
    pub task: TrackingTask,
    pub settings: MpcSettings,
    pub phase: f64,
    prev: Option<SplineControl>,
}

impl<'a> MpcController<'a> {
    pub fn new(dynamics: &'a DynamicsModel, env: ParticleConfig, task: TrackingTask, settings: MpcSettings, phase: f64) -> Self {
        MpcController {
            dynamics,
            env,
            task,
            settings,
            phase,
            prev: None,
        }
    }
}

impl Controller for MpcController<'_> {
    fn act(&mut self, posterior: &HistoryWindow, step: usize) -> Result<Array1<f64>> {
        let s = &self.settings;
        let init = match &self.prev {
            Some(c) => warm_start(c),
            None => Array2::from_elem((s.knots, 1), self.env.g),
        };
        let mut p = self.task.problem(&self.env, s.horizon, s.knots, s.spline, step, self.phase, posterior.clone(), init);
        p.config.rollouts = s.rollouts;
        p.config.iterations = s.iterations;
        let rep = mpc_solve(self.dynamics, &p)?;
        let ctrl = SplineControl::new(rep.knots, s.horizon, s.spline)?;
        let u = ctrl.eval(0)?;
        self.prev = Some(ctrl);
        Ok(u)
    }
}

fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let bins = bins.max(1);
    let hi = values.iter().copied().fold(0.0f64, f64::max).max(1e-12);
    let width = hi / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64 * width, (i + 1) as f64 * width, c))
        .collect()
}

/// Windows spread deterministically over the held-out episodes.
fn holdout_batch(eps: &[Episode], count: usize, horizon: usize, history: usize, seed: u64) -> Result<TrajectoryBatch> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    TrajectoryBatch::sample(eps, count.max(1), horizon, history, &mut r)
}

fn dynamics_errors(model: &DynamicsModel, batch: &TrajectoryBatch) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let h = batch.history;
    let t_len = batch.horizon;
    let n = model.state_dim;
    let b = batch.batch_size();
    let x0 = batch.states.slice(s![.., 0..h + 1, ..]).to_owned();
    let u0 = batch.actions.slice(s![.., 0..h + 1, ..]).to_owned();
    let one = model.predict_batch(x0.view(), u0.view())?;
    let truth = batch.states.slice(s![.., h + 1, ..]);
    let one_step: Vec<f64> = (0..n)
        .map(|d| (&one.column(d) - &truth.column(d)).mapv(f64::abs).mean().unwrap_or(f64::NAN))
        .collect();
    let mut x = x0;
    let mut err = vec![0.0; n];
    let mut norms = Vec::new();
    for k in 0..t_len {
        let u = batch.actions.slice(s![.., k..k + h + 1, ..]).to_owned();
        let next = model.predict_batch(x.view(), u.view())?;
        let truth = batch.states.slice(s![.., k + h + 1, ..]);
        for d in 0..n {
            err[d] += (&next.column(d) - &truth.column(d)).mapv(f64::abs).sum();
        }
        if k == 0 {
            for bi in 0..b {
                let (_, jx, ju) = model.step_jacobian(x.index_axis(Axis(0), bi), u.index_axis(Axis(0), bi))?;
                let j = ndarray::concatenate(Axis(1), &[jx.view(), ju.view()]).expect("same rows");
                norms.push(spectral_norm(j.view()));
            }
        }
        let shifted = x.slice(s![.., 1.., ..]).to_owned();
        x.slice_mut(s![.., ..h, ..]).assign(&shifted);
        x.slice_mut(s![.., h, ..]).assign(&next);
    }
    let rollout = err.iter().map(|e| e / (b * t_len) as f64).collect();
    Ok((one_step, rollout, norms))
}

/// Bootstrap data, concurrent dynamics/estimator training, optional MPC
/// collection rounds, then a held-out evaluation report.
pub fn run_particle_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<ParticleReport> {
    let exp = &cfg.particle;
    exp.env.validate()?;
    exp.train.validate()?;
    if exp.trajectories == 0 || exp.holdout_trajectories == 0 || exp.log_every == 0 {
        return Err(SnsError::Config("pipeline needs trajectories, holdout_trajectories and log_every ≥ 1".into()));
    }
    create_out(out)?;
    let seed = cfg.seed;
    let data = generate_particle_dataset(&exp.env, exp.trajectories, sub_seed(seed, 1))?;
    let holdout = generate_particle_dataset(&exp.env, exp.holdout_trajectories, sub_seed(seed, 2))?;
    let mut outputs = vec![
        "dynamics_metrics.csv",
        "estimator_metrics.csv",
        "jacobian_histogram.csv",
        "dynamics.json",
        "estimator.json",
        "report.json",
    ];
    if exp.write_dataset {
        write_dataset(&out.join("dataset"), &data, exp.env.dt, sub_seed(seed, 1))?;
        write_dataset(&out.join("holdout"), &holdout, exp.env.dt, sub_seed(seed, 2))?;
        outputs.extend(["dataset.json", "dataset.bin", "holdout.json", "holdout.bin"]);
    }
    let mut buffer = ReplayBuffer::new(exp.replay_capacity.max(exp.trajectories))?;
    for ep in &data {
        buffer.push(ep.clone());
    }
    let stats = buffer.freeze_stats(exp.train.kind)?.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 3));
    let (dynamics, estimator) = build_models(&exp.model, &stats, exp.measured.clone(), &exp.train, &mut rng)?;
    let mut trainer = ConcurrentTrainer::new(dynamics, estimator, exp.train.clone())?;
    let mut dyn_rows: Vec<DynamicsMetrics> = Vec::new();
    let mut est_rows: Vec<EstimatorMetrics> = Vec::new();
    let mut collected = 0;
    let phases = 1 + exp.collect.rounds;
    let mut step = 0;
    let train_phase = |trainer: &mut ConcurrentTrainer,
                       steps: usize,
                       buffer: &ReplayBuffer,
                       rng: &mut ChaCha8Rng,
                       step: &mut usize,
                       dyn_rows: &mut Vec<DynamicsMetrics>,
                       est_rows: &mut Vec<EstimatorMetrics>|
     -> Result<()> {
        let eps = buffer.episodes();
        for _ in 0..steps {
            let batch = TrajectoryBatch::sample(&eps, exp.train.batch_size, exp.train.horizon, exp.train.history, rng)?;
            let dm = trainer.train_dynamics_step(&batch, rng)?;
            let em = trainer.train_estimator_step(&batch, rng)?;
            if *step % exp.log_every == 0 || *step + 1 == exp.train_steps {
                dyn_rows.push(dm);
                est_rows.push(em);
            }
            *step += 1;
        }
        Ok(())
    };
    let write_metrics = |dyn_rows: &[DynamicsMetrics], est_rows: &[EstimatorMetrics]| -> Result<()> {
        let mut w = BufWriter::new(File::create(out.join("dynamics_metrics.csv"))?);
        write_metrics_csv(dyn_rows, &mut w)?;
        w.flush()?;
        let mut w = csv_file(&out.join("estimator_metrics.csv"), ESTIMATOR_METRICS_HEADER)?;
        for m in est_rows {
            writeln!(w, "{},{},{},{},{},{}", m.step, m.loss, m.l_sns, m.prior_mae, m.posterior_mae, m.lr)?;
        }
        w.flush()?;
        Ok(())
    };
    for phase in 0..phases {
        let steps = if phase == 0 { exp.train_steps } else { exp.collect.steps_per_round };
        let r = train_phase(&mut trainer, steps, &buffer, &mut rng, &mut step, &mut dyn_rows, &mut est_rows);
        if let Err(e) = r {
            write_metrics(&dyn_rows, &est_rows)?;
            return Err(e);
        }
        if phase + 1 < phases {
            for _ in 0..exp.collect.episodes_per_round {
                let ph = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                let dynamics = trainer.dynamics.clone();
                let mut ctrl = MpcController::new(&dynamics, exp.env.clone(), exp.collect.task.clone(), exp.collect.mpc.clone(), ph);
                let collect = crate::trainer::CollectConfig {
                    episodes: 1,
                    measurement_noise: exp.train.measurement_noise,
                };
                crate::trainer::closed_loop_collect(
                    &exp.env,
                    Some((&trainer.dynamics, &trainer.estimator)),
                    Some(&mut ctrl),
                    &mut buffer,
                    &collect,
                    &mut rng,
                )?;
                collected += 1;
            }
        }
    }
    write_metrics(&dyn_rows, &est_rows)?;
    let hash = cfg.hash();
    save_checkpoint(&out.join("dynamics.json"), &trainer.dynamics, &hash, step)?;
    save_checkpoint(&out.join("estimator.json"), &trainer.estimator, &hash, step)?;

    let batch = holdout_batch(&holdout, exp.eval_windows, exp.train.horizon, exp.train.history, sub_seed(seed, 4))?;
    let (one_step_mae, rollout_mae, mut norms) = dynamics_errors(&trainer.dynamics, &batch)?;
    norms.truncate(exp.jacobian_samples.max(1));
    let hist = histogram(&norms, exp.histogram_bins);
    let mut w = csv_file(&out.join("jacobian_histogram.csv"), HISTOGRAM_HEADER)?;
    for (lo, hi, c) in &hist {
        writeln!(w, "{lo},{hi},{c}")?;
    }
    w.flush()?;
    let filt = run_filter(
        &batch,
        &trainer.dynamics,
        &trainer.estimator,
        &exp.train,
        false,
        &mut ChaCha8Rng::seed_from_u64(sub_seed(seed, 5)),
    )?;
    let bound = trainer.dynamics.net.lipschitz_bound();
    let report = ParticleReport {
        transitions: total_transitions(&data),
        holdout_transitions: total_transitions(&holdout),
        train_steps: step,
        collected_episodes: collected,
        one_step_mae,
        rollout_mae,
        jacobian_norm_max: norms.iter().copied().fold(0.0, f64::max),
        jacobian_histogram: hist,
        estimator_prior_mae: filt.prior_mae,
        estimator_posterior_mae: filt.posterior_mae,
        c: bound.c,
        s: bound.s,
    };
    write_json(&out.join("report.json"), &report)?;
    write_manifest(out, "particle", cfg, &outputs)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcCompareExperiment {
    /// dynamics checkpoint written by the particle pipeline
    pub checkpoint: Option<PathBuf>,
    pub env: ParticleConfig,
    pub task: TrackingTask,
    pub horizon: usize,
    pub spline: SplineKind,
    pub knots: Vec<usize>,
    pub ggn_rollouts: Vec<usize>,
    pub ggn_iterations: Vec<usize>,
    pub sampler_samples: Vec<usize>,
    pub sampler_iterations: Vec<usize>,
    /// σ, ρ, τ template for the sampler; counts and seed come from the sweep
    pub sampler: SamplerConfig,
    pub seeds: usize,
    pub episodes_per_seed: usize,
    /// cells compared head to head
    pub headline_knots: usize,
    pub headline_ggn: [usize; 2],
    pub headline_sampler: [usize; 2],
}

impl Default for MpcCompareExperiment {
    fn default() -> Self {
        MpcCompareExperiment {
            checkpoint: None,
            env: ParticleConfig::default(),
            task: TrackingTask::default(),
            horizon: 25,
            spline: SplineKind::Linear,
            knots: vec![3, 5, 8],
            ggn_rollouts: vec![16],
            ggn_iterations: vec![1],
            sampler_samples: vec![128],
            sampler_iterations: vec![4],
            sampler: SamplerConfig {
                samples: 128,
                iterations: 4,
                sigma: vec![10.0],
                rho: 0.5,
                tau: 0.001,
                seed: 0,
            },
            seeds: 5,
            episodes_per_seed: 1,
            headline_knots: 5,
            headline_ggn: [16, 1],
            headline_sampler: [128, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub knots: usize,
    pub rollouts: usize,
    pub iterations: usize,
    pub seed: u64,
    pub cumulative_cost: f64,
    pub mean_abs_error: f64,
    pub success: bool,
    pub monotone_violations: usize,
    pub mean_solve_s: f64,
    pub max_solve_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub total_monotone_violations: usize,
    /// seeds where headline GGN cost ≤ headline sampler cost
    pub ggn_wins: usize,
    pub seeds: usize,
    pub label: String,
}

pub const TRACKING_LABEL: &str =
    "particle height tracking (desk-scale analog); sampler is a simplified annealed-Gaussian softmin planner";

/// Solver cells of the sweep, GGN first.
pub fn sweep_cells(exp: &MpcCompareExperiment) -> Vec<(usize, SolverChoice)> {
    let mut cells = Vec::new();
    for &k in &exp.knots {
        for &r in &exp.ggn_rollouts {
            for &it in &exp.ggn_iterations {
                cells.push((k, SolverChoice::Ggn { rollouts: r, iterations: it }));
            }
        }
        for &n in &exp.sampler_samples {
            for &it in &exp.sampler_iterations {
                let mut c = exp.sampler.clone();
                c.samples = n;
                c.iterations = it;
                cells.push((k, SolverChoice::Sampler(c)));
            }
        }
    }
    cells
}

pub fn run_mpc_compare_with<D: HistoryDynamics + ?Sized>(
    cfg: &ExperimentConfig,
    dynamics: &D,
    out: &Path,
) -> Result<ComparisonReport> {
    let exp = &cfg.mpc;
    exp.env.validate()?;
    if exp.knots.is_empty() || exp.seeds == 0 || exp.episodes_per_seed == 0 || exp.task.steps == 0 {
        return Err(SnsError::Config("mpc-compare needs knots, seeds, episodes and steps".into()));
    }
    for &k in &exp.knots {
        if k == 0 || k > exp.horizon {
            return Err(SnsError::Config(format!("knot count {k} does not fit horizon {}", exp.horizon)));
        }
    }
    create_out(out)?;
    let cells = sweep_cells(exp);
    let jobs: Vec<(usize, usize, u64)> = (0..cells.len())
        .flat_map(|c| (0..exp.seeds as u64).map(move |s| (c, 0, s)))
        .collect();
    use rayon::prelude::*;
    let rows: Vec<Result<ComparisonRow>> = jobs
        .par_iter()
        .map(|&(c, _, s)| {
            let (k, solver) = &cells[c];
            let run_seed = cfg.seed.wrapping_add(s);
            let mut cost = 0.0;
            let mut err = 0.0;
            let mut success = true;
            let mut viol = 0;
            let mut times = Vec::new();
            for e in 0..exp.episodes_per_seed {
                let o = run_tracking_episode(
                    &exp.env,
                    &exp.task,
                    dynamics,
                    solver,
                    exp.horizon,
                    *k,
                    exp.spline,
                    sub_seed(run_seed, 100 + e as u64),
                )?;
                cost += o.cumulative_cost;
                err += o.mean_abs_error;
                success &= o.success;
                viol += o.monotone_violations;
                times.extend(o.solve_times);
            }
            let eps = exp.episodes_per_seed as f64;
            let (method, rollouts, iterations) = solver.label();
            Ok(ComparisonRow {
                method: method.into(),
                knots: *k,
                rollouts,
                iterations,
                seed: run_seed,
                cumulative_cost: cost / eps,
                mean_abs_error: err / eps,
                success,
                monotone_violations: viol,
                mean_solve_s: times.iter().sum::<f64>() / times.len().max(1) as f64,
                max_solve_s: times.iter().copied().fold(0.0, f64::max),
            })
        })
        .collect();
    let rows: Vec<ComparisonRow> = rows.into_iter().collect::<Result<_>>()?;
    let mut w = csv_file(&out.join("comparison.csv"), COMPARISON_HEADER)?;
    let mut t = csv_file(&out.join("timings.csv"), TIMINGS_HEADER)?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.method, r.knots, r.rollouts, r.iterations, r.seed, r.cumulative_cost, r.mean_abs_error, r.success, r.monotone_violations
        )?;
        writeln!(
            t,
            "{},{},{},{},{},{},{}",
            r.method, r.knots, r.rollouts, r.iterations, r.seed, r.mean_solve_s, r.max_solve_s
        )?;
    }
    w.flush()?;
    t.flush()?;
    let pick = |method: &str, cell: [usize; 2], seed: u64| {
        rows.iter()
            .find(|r| {
                r.method == method && r.knots == exp.headline_knots && [r.rollouts, r.iterations] == cell && r.seed == seed
            })
            .map(|r| r.cumulative_cost)
    };
    let mut ggn_wins = 0;
    let mut compared = 0;
    for s in 0..exp.seeds as u64 {
        let seed = cfg.seed.wrapping_add(s);
        if let (Some(g), Some(smp)) = (pick("ggn", exp.headline_ggn, seed), pick("sampler", exp.headline_sampler, seed)) {
            compared += 1;
            if g <= smp {
                ggn_wins += 1;
            }
        }
    }
    let report = ComparisonReport {
        total_monotone_violations: rows.iter().map(|r| r.monotone_violations).sum(),
        rows,
        ggn_wins,
        seeds: compared,
        label: TRACKING_LABEL.into(),
    };
    write_json(&out.join("report.json"), &report)?;
    write_manifest(out, "mpc-compare", cfg, &["comparison.csv", "timings.csv", "report.json"])?;
    Ok(report)
}

/// Loads the dynamics checkpoint named in the config and runs the sweep.
pub fn run_mpc_compare(cfg: &ExperimentConfig, out: &Path) -> Result<ComparisonReport> {
    let path = cfg
        .mpc
        .checkpoint
        .as_ref()
        .ok_or_else(|| SnsError::Config("mpc-compare needs mpc.checkpoint".into()))?;
    if !path.exists() {
        return Err(SnsError::Config(format!("checkpoint {} is missing", path.display())));
    }
    let ck = load_checkpoint::<DynamicsModel>(path)?;
    run_mpc_compare_with(cfg, &ck.model, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticResiduals {
    pub kind: LikelihoodKind,
    pub samples: usize,
    pub dims: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualExperiment {
    /// dynamics checkpoint
    pub checkpoint: Option<PathBuf>,
    /// dataset stem (`<stem>.json` + `<stem>.bin`)
    pub dataset: Option<PathBuf>,
    /// used instead of checkpoint + dataset when present
    pub synthetic: Option<SyntheticResiduals>,
}

pub fn synthetic_residuals(spec: &SyntheticResiduals, seed: u64) -> Array2<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((spec.samples, spec.dims), |_| match spec.kind {
        LikelihoodKind::Gaussian => {
            let z: f64 = StandardNormal.sample(&mut r);
            spec.scale * z
        }
        LikelihoodKind::Cauchy => spec.scale * (std::f64::consts::PI * (r.random::<f64>() - 0.5)).tan(),
    })
}

/// One-step residuals `x_{t+1} − f(X_t, U_t)` over every full window.
pub fn one_step_residuals(model: &DynamicsModel, episodes: &[Episode]) -> Result<Array2<f64>> {
    let h = model.history;
    let mut rows = Vec::new();
    for ep in episodes {
        let len = ep.actions.nrows();
        if len < h + 1 {
            continue;
        }
        let count = len - h;
        let n = model.state_dim;
        let m = model.action_dim;
        let mut x = ndarray::Array3::zeros((count, h + 1, n));
        let mut u = ndarray::Array3::zeros((count, h + 1, m));
        for i in 0..count {
            x.slice_mut(s![i, .., ..]).assign(&ep.states.slice(s![i..i + h + 1, ..]));
            u.slice_mut(s![i, .., ..]).assign(&ep.actions.slice(s![i..i + h + 1, ..]));
        }
        let pred = model.predict_batch(x.view(), u.view())?;
        let truth = ep.states.slice(s![h + 1..len + 1, ..]);
        rows.push(&truth - &pred);
    }
    if rows.is_empty() {
        return Err(SnsError::InvalidInput("no episode is long enough for the model history".into()));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("same columns"))
}

pub fn run_residual_report(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ResidualFit>> {
    let exp = &cfg.residual;
    let residuals = match (&exp.synthetic, &exp.checkpoint, &exp.dataset) {
        (Some(spec), _, _) => {
            if spec.samples == 0 || spec.dims == 0 || !(spec.scale > 0.0) {
                return Err(SnsError::Config("synthetic residuals need samples, dims and a positive scale".into()));
            }
            synthetic_residuals(spec, sub_seed(cfg.seed, 1))
        }
        (None, Some(ck), Some(ds)) => {
            let model = load_checkpoint::<DynamicsModel>(ck)?.model;
            let (_, eps) = crate::tasks::read_dataset(ds)?;
            one_step_residuals(&model, &eps)?
        }
        _ => return Err(SnsError::Config("residual-report needs synthetic, or checkpoint and dataset".into())),
    };
    create_out(out)?;
    let rows = fit_residual_report(residuals.view())?;
    let mut w = BufWriter::new(File::create(out.join("residual_report.csv"))?);
    write_residual_report(&rows, &mut w)?;
    w.flush()?;
    write_manifest(out, "residual-report", cfg, &["residual_report.csv"])?;
    Ok(rows)
}
