//! Single-shooting trajectory optimization over spline knots with a
//! Gauss–Newton backward pass and a parallel grid line search.

use std::time::Instant;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::HistoryDynamics;
use crate::error::{Result, SnsError};
use crate::estimator::HistoryWindow;
use crate::linalg::{cholesky, cholesky_solve};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplineKind {
    ZeroOrder,
    #[default]
    Linear,
}

/// Knots spread uniformly over steps `0..T−1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineControl {
    pub knots: Array2<f64>,
    pub horizon: usize,
    pub kind: SplineKind,
}

/// Interpolation weights `[T × k]`; row `t` maps knots to `u_t`.
pub fn spline_basis(n_knots: usize, horizon: usize, kind: SplineKind) -> Result<Array2<f64>> {
    if n_knots == 0 || n_knots > horizon {
        return Err(SnsError::InvalidInput(format!(
            "need 1 ≤ knots ≤ horizon, got {n_knots} knots for horizon {horizon}"
        )));
    }
    let mut w = Array2::zeros((horizon, n_knots));
    if n_knots == 1 {
        w.fill(1.0);
        return Ok(w);
    }
    let spacing = (horizon - 1) as f64 / (n_knots - 1) as f64;
    for t in 0..horizon {
        let pos = t as f64 / spacing;
        let left = (pos.floor() as usize).min(n_knots - 1);
        match kind {
            SplineKind::ZeroOrder => w[[t, left]] = 1.0,
            SplineKind::Linear => {
                if left == n_knots - 1 {
                    w[[t, left]] = 1.0;
                } else {
                    let frac = pos - left as f64;
                    w[[t, left]] = 1.0 - frac;
                    w[[t, left + 1]] += frac;
                }
            }
        }
    }
    Ok(w)
}

impl SplineControl {
    pub fn new(knots: Array2<f64>, horizon: usize, kind: SplineKind) -> Result<Self> {
        spline_basis(knots.nrows(), horizon, kind)?;
        Ok(SplineControl { knots, horizon, kind })
    }

    pub fn basis(&self) -> Array2<f64> {
        spline_basis(self.knots.nrows(), self.horizon, self.kind).expect("validated at construction")
    }

    pub fn eval(&self, t: usize) -> Result<Array1<f64>> {
        if t >= self.horizon {
            return Err(SnsError::InvalidInput(format!("step {t} outside horizon {}", self.horizon)));
        }
        Ok(self.basis().row(t).dot(&self.knots))
    }

    /// All actions `u_{0..T−1}` as `[T × m]`.
    pub fn actions(&self) -> Array2<f64> {
        self.basis().dot(&self.knots)
    }
}

pub fn spline_eval(ctrl: &SplineControl, t: usize) -> Result<Array1<f64>> {
    ctrl.eval(t)
}

/// Relaxed log barrier: `−ln(−g)` below `−δ`, quadratic extension above.
pub fn relaxed_barrier(g: f64, delta: f64) -> f64 {
    if g < -delta {
        -(-g).ln()
    } else {
        let r = (g + 2.0 * delta) / delta;
        -delta.ln() + 0.5 * r * r - 0.5
    }
}

pub fn relaxed_barrier_derivative(g: f64, delta: f64) -> f64 {
    if g < -delta {
        -1.0 / g
    } else {
        (g + 2.0 * delta) / (delta * delta)
    }
}

pub fn relaxed_barrier_second(g: f64, delta: f64) -> f64 {
    if g < -delta {
        1.0 / (g * g)
    } else {
        1.0 / (delta * delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ResidualLoss {
    /// `½ε²`
    #[default]
    Quadratic,
    /// `δ²(√(1+(ε/δ)²) − 1)`
    PseudoHuber { delta: f64 },
}

impl ResidualLoss {
    pub fn value(self, e: f64) -> f64 {
        match self {
            ResidualLoss::Quadratic => 0.5 * e * e,
            ResidualLoss::PseudoHuber { delta } => delta * delta * ((1.0 + (e / delta).powi(2)).sqrt() - 1.0),
        }
    }

    pub fn d1(self, e: f64) -> f64 {
        match self {
            ResidualLoss::Quadratic => e,
            ResidualLoss::PseudoHuber { delta } => e / (1.0 + (e / delta).powi(2)).sqrt(),
        }
    }

    pub fn d2(self, e: f64) -> f64 {
        match self {
            ResidualLoss::Quadratic => 1.0,
            ResidualLoss::PseudoHuber { delta } => (1.0 + (e / delta).powi(2)).powf(-1.5),
        }
    }
}

/// Residual maps with a weighted convex loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum CostTerm {
    /// `x_t[index] − reference[t−1]` for `t = 1..T`
    StateTracking {
        index: usize,
        reference: Vec<f64>,
        weight: f64,
        #[serde(default)]
        loss: ResidualLoss,
    },
    /// `u_t[index] − reference` for `t = 0..T−1`
    ActionEffort {
        index: usize,
        reference: f64,
        weight: f64,
        #[serde(default)]
        loss: ResidualLoss,
    },
    /// `u_t[index] − u_{t−1}[index]`, starting from the last applied action
    ActionRate {
        index: usize,
        weight: f64,
        #[serde(default)]
        loss: ResidualLoss,
    },
    /// `x_T[index] − target`
    Terminal {
        index: usize,
        target: f64,
        weight: f64,
        #[serde(default)]
        loss: ResidualLoss,
    },
    /// trajectory-level: `mean_t x_t[index] − target`
    TrajectoryMean {
        index: usize,
        target: f64,
        weight: f64,
        #[serde(default)]
        loss: ResidualLoss,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintTarget {
    State,
    Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSide {
    Upper,
    Lower,
}

/// Stagewise bound `g ≤ 0` handled by `β·log_δ(g)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierConstraint {
    pub target: ConstraintTarget,
    pub index: usize,
    pub side: BoundSide,
    pub bound: f64,
    pub delta: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub horizon: usize,
    pub knots: usize,
    pub spline: SplineKind,
    pub costs: Vec<CostTerm>,
    pub constraints: Vec<BarrierConstraint>,
    /// line-search candidates, `R ≥ 2`
    pub rollouts: usize,
    pub iterations: usize,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            horizon: 20,
            knots: 5,
            spline: SplineKind::Linear,
            costs: Vec::new(),
            constraints: Vec::new(),
            rollouts: 16,
            iterations: 1,
        }
    }
}

/// One solve instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShootingProblem {
    pub config: ProblemConfig,
    /// state rows `x_{−H..0}`; action rows end at the last applied action
    pub initial: HistoryWindow,
    pub initial_knots: Array2<f64>,
}

impl ShootingProblem {
    pub fn validate<D: HistoryDynamics + ?Sized>(&self, dynamics: &D) -> Result<()> {
        let c = &self.config;
        spline_basis(c.knots, c.horizon, c.spline)?;
        let (n, m, rows) = (dynamics.state_dim(), dynamics.action_dim(), dynamics.history() + 1);
        if self.initial.x.dim() != (rows, n) || self.initial.u.dim() != (rows, m) {
            return Err(SnsError::InvalidInput("initial history does not match the dynamics".into()));
        }
        if self.initial_knots.dim() != (c.knots, m) {
            return Err(SnsError::dims("initial knots", c.knots * m, self.initial_knots.len()));
        }
        for term in &c.costs {
            let (idx, dim, weight, loss) = match term {
                CostTerm::StateTracking {
                    index,
                    reference,
                    weight,
                    loss,
                } => {
                    if reference.len() != c.horizon {
                        return Err(SnsError::dims("tracking reference", c.horizon, reference.len()));
                    }
                    (*index, n, *weight, *loss)
                }
                CostTerm::Terminal { index, weight, loss, .. } | CostTerm::TrajectoryMean { index, weight, loss, .. } => {
                    (*index, n, *weight, *loss)
                }
                CostTerm::ActionEffort { index, weight, loss, .. } | CostTerm::ActionRate { index, weight, loss } => {
                    (*index, m, *weight, *loss)
                }
            };
            if idx >= dim {
                return Err(SnsError::InvalidInput(format!("cost index {idx} out of range")));
            }
            if !(weight >= 0.0) {
                return Err(SnsError::InvalidInput("cost weights must be nonnegative".into()));
            }
            if let ResidualLoss::PseudoHuber { delta } = loss {
                if !(delta > 0.0) {
                    return Err(SnsError::InvalidInput("pseudo-Huber delta must be positive".into()));
                }
            }
        }
        for b in &c.constraints {
            let dim = match b.target {
                ConstraintTarget::State => n,
                ConstraintTarget::Action => m,
            };
            if b.index >= dim || !(b.delta > 0.0) || !(b.beta > 0.0) {
                return Err(SnsError::InvalidInput("constraint needs a valid index and δ, β > 0".into()));
            }
        }
        if c.rollouts < 2 {
            return Err(SnsError::InvalidInput("line search needs R ≥ 2".into()));
        }
        Ok(())
    }

    pub fn control(&self, knots: Array2<f64>) -> Result<SplineControl> {
        SplineControl::new(knots, self.config.horizon, self.config.spline)
    }
}

fn roll_into(window: &mut Array2<f64>, row: ndarray::ArrayView1<f64>) {
    let n = window.nrows();
    for j in 0..n - 1 {
        let next = window.row(j + 1).to_owned();
        window.row_mut(j).assign(&next);
    }
    window.row_mut(n - 1).assign(&row);
}

/// States `x_{1..T}` `[T × n]` under `actions` `[T × m]`.
pub fn rollout<D: HistoryDynamics + ?Sized>(
    dynamics: &D,
    initial: &HistoryWindow,
    actions: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let t_len = actions.nrows();
    let mut x = initial.x.clone();
    let mut u = initial.u.clone();
    let mut out = Array2::zeros((t_len, dynamics.state_dim()));
    for t in 0..t_len {
        roll_into(&mut u, actions.row(t));
        let next = dynamics.step(x.view(), u.view())?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SnsError::non_finite(format!("rollout state at step {t}")));
        }
        out.row_mut(t).assign(&next);
        roll_into(&mut x, next.view());
    }
    Ok(out)
}

/// Batched rollout of `actions` `[B × T × m]`, returning `[B × T × n]`.
pub fn rollout_batch<D: HistoryDynamics + ?Sized>(
    dynamics: &D,
    initial: &HistoryWindow,
    actions: &Array3<f64>,
) -> Result<Array3<f64>> {
    let (b, t_len, _) = actions.dim();
    let h = dynamics.history();
    let mut x = Array3::zeros((b, h + 1, dynamics.state_dim()));
    let mut u = Array3::zeros((b, h + 1, dynamics.action_dim()));
    for bi in 0..b {
        x.slice_mut(s![bi, .., ..]).assign(&initial.x);
        u.slice_mut(s![bi, .., ..]).assign(&initial.u);
    }
    let mut out = Array3::zeros((b, t_len, dynamics.state_dim()));
    for t in 0..t_len {
        let shifted = u.slice(s![.., 1.., ..]).to_owned();
        u.slice_mut(s![.., ..h, ..]).assign(&shifted);
        u.slice_mut(s![.., h, ..]).assign(&actions.slice(s![.., t, ..]));
        let next = dynamics.step_batch(x.view(), u.view())?;
        out.slice_mut(s![.., t, ..]).assign(&next);
        let shifted = x.slice(s![.., 1.., ..]).to_owned();
        x.slice_mut(s![.., ..h, ..]).assign(&shifted);
        x.slice_mut(s![.., h, ..]).assign(&next);
    }
    Ok(out)
}

/// States `x_{1..T}` and their knot sensitivities `∂x_t/∂vec(knots)`
/// (`[n × k·m]`), with knots flattened row-major.
pub fn rollout_with_sensitivities<D: HistoryDynamics + ?Sized>(
    dynamics: &D,
    initial: &HistoryWindow,
    ctrl: &SplineControl,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let basis = ctrl.basis();
    let actions = basis.dot(&ctrl.knots);
    let (n, m, rows) = (dynamics.state_dim(), dynamics.action_dim(), dynamics.history() + 1);
    let kdim = ctrl.knots.len();
    let t_len = ctrl.horizon;
    let mut x = initial.x.clone();
    let mut u = initial.u.clone();
    let mut sx: Vec<Array2<f64>> = vec![Array2::zeros((n, kdim)); rows];
    let mut su: Vec<Array2<f64>> = vec![Array2::zeros((m, kdim)); rows];
    let mut states = Array2::zeros((t_len, n));
    let mut sens = Vec::with_capacity(t_len);
    for t in 0..t_len {
        roll_into(&mut u, actions.row(t));
        let mut du = Array2::zeros((m, kdim));
        for (kappa, &w) in basis.row(t).iter().enumerate() {
            if w != 0.0 {
                for i in 0..m {
                    du[[i, kappa * m + i]] = w;
                }
            }
        }
        su.remove(0);
        su.push(du);
        let (next, jx, ju) = dynamics.step_jacobian(x.view(), u.view())?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SnsError::non_finite(format!("rollout state at step {t}")));
        }
        let mut s_next = Array2::zeros((n, kdim));
        for j in 0..rows {
            s_next += &jx.slice(s![.., j * n..(j + 1) * n]).dot(&sx[j]);
            s_next += &ju.slice(s![.., j * m..(j + 1) * m]).dot(&su[j]);
        }
        states.row_mut(t).assign(&next);
        roll_into(&mut x, next.view());
        sx.remove(0);
        sx.push(s_next.clone());
        sens.push(s_next);
    }
    Ok((states, sens))
}

#[derive(Debug, Clone, Copy)]
enum Penalty {
    Loss { weight: f64, loss: ResidualLoss },
    Barrier { beta: f64, delta: f64 },
}

impl Penalty {
    fn value(self, e: f64) -> f64 {
        match self {
            Penalty::Loss { weight, loss } => weight * loss.value(e),
            Penalty::Barrier { beta, delta } => beta * relaxed_barrier(e, delta),
        }
    }

    fn d1(self, e: f64) -> f64 {
        match self {
            Penalty::Loss { weight, loss } => weight * loss.d1(e),
            Penalty::Barrier { beta, delta } => beta * relaxed_barrier_derivative(e, delta),
        }
    }

    fn d2(self, e: f64) -> f64 {
        match self {
            Penalty::Loss { weight, loss } => weight * loss.d2(e),
            Penalty::Barrier { beta, delta } => beta * relaxed_barrier_second(e, delta),
        }
    }
}

/// Visits every residual `(value, penalty, jacobian row)`; the row is only
/// built when sensitivities are supplied.
fn for_each_residual<F>(
    cfg: &ProblemConfig,
    initial: &HistoryWindow,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    sens: Option<(&[Array2<f64>], &Array2<f64>, usize)>,
    mut visit: F,
) where
    F: FnMut(f64, Penalty, Option<Array1<f64>>),
{
    let t_len = states.nrows();
    let state_row = |t: usize, i: usize| sens.map(|(s, _, _)| s[t].row(i).to_owned());
    let action_row = |t: usize, i: usize| {
        sens.map(|(_, basis, m)| {
            let mut r = Array1::zeros(basis.ncols() * m);
            for (kappa, &w) in basis.row(t).iter().enumerate() {
                r[kappa * m + i] = w;
            }
            r
        })
    };
    for term in &cfg.costs {
        match term {
            CostTerm::StateTracking {
                index,
                reference,
                weight,
                loss,
            } => {
                let p = Penalty::Loss { weight: *weight, loss: *loss };
                for t in 0..t_len {
                    visit(states[[t, *index]] - reference[t], p, state_row(t, *index));
                }
            }
            CostTerm::ActionEffort {
                index,
                reference,
                weight,
                loss,
            } => {
                let p = Penalty::Loss { weight: *weight, loss: *loss };
                for t in 0..t_len {
                    visit(actions[[t, *index]] - reference, p, action_row(t, *index));
                }
            }
            CostTerm::ActionRate { index, weight, loss } => {
                let p = Penalty::Loss { weight: *weight, loss: *loss };
                let last = initial.u[[initial.u.nrows() - 1, *index]];
                for t in 0..t_len {
                    let prev = if t == 0 { last } else { actions[[t - 1, *index]] };
                    let jac = match (action_row(t, *index), t) {
                        (Some(r), 0) => Some(r),
                        (Some(r), _) => Some(r - action_row(t - 1, *index).expect("rows built together")),
                        (None, _) => None,
                    };
                    visit(actions[[t, *index]] - prev, p, jac);
                }
            }
            CostTerm::Terminal {
                index,
                target,
                weight,
                loss,
            } => {
                let p = Penalty::Loss { weight: *weight, loss: *loss };
                visit(states[[t_len - 1, *index]] - target, p, state_row(t_len - 1, *index));
            }
            CostTerm::TrajectoryMean {
                index,
                target,
                weight,
                loss,
            } => {
                let p = Penalty::Loss { weight: *weight, loss: *loss };
                let mean = states.column(*index).sum() / t_len as f64;
                let jac = sens.map(|(s, _, _)| {
                    let mut r = Array1::zeros(s[0].ncols());
                    for st in s {
                        r += &st.row(*index);
                    }
                    r / t_len as f64
                });
                visit(mean - target, p, jac);
            }
        }
    }
    for b in &cfg.constraints {
        let p = Penalty::Barrier {
            beta: b.beta,
            delta: b.delta,
        };
        let sign = match b.side {
            BoundSide::Upper => 1.0,
            BoundSide::Lower => -1.0,
        };
        for t in 0..t_len {
            let (v, row) = match b.target {
                ConstraintTarget::State => (states[[t, b.index]], state_row(t, b.index)),
                ConstraintTarget::Action => (actions[[t, b.index]], action_row(t, b.index)),
            };
            visit(sign * (v - b.bound), p, row.map(|r| r * sign));
        }
    }
}

/// Objective for already simulated states and actions.
pub fn trajectory_cost(cfg: &ProblemConfig, initial: &HistoryWindow, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> f64 {
    let mut total = 0.0;
    for_each_residual(cfg, initial, states, actions, None, |e, p, _| total += p.value(e));
    total
}

/// Objective at `knots`; a failed rollout costs `+∞`.
pub fn evaluate_cost<D: HistoryDynamics + ?Sized>(dynamics: &D, problem: &ShootingProblem, knots: &Array2<f64>) -> Result<f64> {
    let ctrl = problem.control(knots.clone())?;
    let actions = ctrl.actions();
    Ok(match rollout(dynamics, &problem.initial, actions.view()) {
        Ok(states) => finite_or_inf(trajectory_cost(&problem.config, &problem.initial, states.view(), actions.view())),
        Err(SnsError::NonFinite { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    })
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Costs of many knot candidates, evaluated as parallel batched rollouts.
pub fn evaluate_candidates<D: HistoryDynamics + ?Sized>(
    dynamics: &D,
    problem: &ShootingProblem,
    candidates: &[Array2<f64>],
) -> Result<Vec<f64>> {
    let basis = spline_basis(problem.config.knots, problem.config.horizon, problem.config.spline)?;
    let chunks: Vec<Result<Vec<f64>>> = candidates
        .par_chunks(32)
        .map(|chunk| {
            let (t_len, m) = (problem.config.horizon, dynamics.action_dim());
            let mut actions = Array3::zeros((chunk.len(), t_len, m));
            for (bi, k) in chunk.iter().enumerate() {
                actions.slice_mut(s![bi, .., ..]).assign(&basis.dot(k));
            }
            let states = rollout_batch(dynamics, &problem.initial, &actions)?;
            Ok((0..chunk.len())
                .map(|bi| {
                    let st = states.index_axis(Axis(0), bi);
                    if st.iter().any(|v| !v.is_finite()) {
                        return f64::INFINITY;
                    }
                    finite_or_inf(trajectory_cost(
                        &problem.config,
                        &problem.initial,
                        st,
                        actions.index_axis(Axis(0), bi),
                    ))
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(candidates.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Gauss–Newton model `(H, q)` and the current cost.
pub fn build_ggn<D: HistoryDynamics + ?Sized>(
    dynamics: &D,
    problem: &ShootingProblem,
    ctrl: &SplineControl,
) -> Result<(Array2<f64>, Array1<f64>, f64)> {
    let basis = ctrl.basis();
    let actions = basis.dot(&ctrl.knots);
    let (states, sens) = rollout_with_sensitivities(dynamics, &problem.initial, ctrl)?;
    let kdim = ctrl.knots.len();
    let mut h = Array2::zeros((kdim, kdim));
    let mut q = Array1::zeros(kdim);
    let mut cost = 0.0;
    let m = dynamics.action_dim();
    for_each_residual(
        &problem.config,
        &problem.initial,
        states.view(),
        actions.view(),
        Some((&sens, &basis, m)),
        |e, p, jac| {
            let jac = jac.expect("sensitivities supplied");
            cost += p.value(e);
            q.scaled_add(p.d1(e), &jac);
            let c2 = p.d2(e);
            if c2 != 0.0 {
                for a in 0..kdim {
                    let ja = jac[a];
                    if ja == 0.0 {
                        continue;
                    }
                    for b in 0..kdim {
                        h[[a, b]] += c2 * ja * jac[b];
                    }
                }
            }
        },
    );
    Ok((h, q, cost))
}

/// `δu = −H⁻¹q` by Cholesky, without any diagonal shift.
pub fn solve_step(h: &Array2<f64>, q: &Array1<f64>) -> Result<Array1<f64>> {
    let l = cholesky(h.view())?;
    Ok(-cholesky_solve(l.view(), q.view()))
}

/// Grid search over `α ∈ {0, 1/(R−1), …, 1}`; ties go to the larger step.
pub fn line_search<D: HistoryDynamics + ?Sized>(
    dynamics: &D,
    problem: &ShootingProblem,
    knots: &Array2<f64>,
    step: &Array2<f64>,
    r: usize,
) -> Result<(f64, f64, Vec<f64>)> {
    if r < 2 {
        return Err(SnsError::InvalidInput("line search needs R ≥ 2".into()));
    }
    let alphas: Vec<f64> = (0..r).map(|j| j as f64 / (r - 1) as f64).collect();
    let candidates: Vec<Array2<f64>> = alphas.iter().map(|a| knots + &(step * *a)).collect();
    let costs = evaluate_candidates(dynamics, problem, &candidates)?;
    let mut best: Option<(f64, f64)> = None;
    for (&a, &c) in alphas.iter().zip(&costs).rev() {
        if c.is_finite() && best.is_none_or(|(_, bc)| c < bc) {
            best = Some((a, c));
        }
    }
    let (alpha, cost) = best.ok_or_else(|| SnsError::non_finite("every line-search candidate"))?;
    Ok((alpha, cost, costs))
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub schema_version: u32,
    pub method: String,
    pub knots: Array2<f64>,
    /// cost before the first iteration, then after each iteration
    pub costs: Vec<f64>,
    /// selected step per iteration (GGN only)
    pub alphas: Vec<f64>,
    pub cholesky_status: String,
    pub rollouts_evaluated: usize,
    pub wall_time_s: f64,
}

impl SolveReport {
    pub fn final_cost(&self) -> f64 {
        *self.costs.last().expect("at least the initial cost")
    }

    pub fn is_monotone(&self) -> bool {
        self.costs.windows(2).all(|w| w[1] <= w[0])
    }
}

pub const GGN_METHOD: &str = "ggn";

pub fn mpc_solve<D: HistoryDynamics + ?Sized>(dynamics: &D, problem: &ShootingProblem) -> Result<SolveReport> {
    let started = Instant::now();
    problem.validate(dynamics)?;
    let mut knots = problem.initial_knots.clone();
    let mut costs = vec![evaluate_cost(dynamics, problem, &knots)?];
    let mut alphas = Vec::new();
    let mut rollouts = 1;
    for _ in 0..problem.config.iterations {
        let ctrl = problem.control(knots.clone())?;
        let (h, q, _) = build_ggn(dynamics, problem, &ctrl)?;
        let step = solve_step(&h, &q)?.into_shape_with_order(knots.raw_dim()).map_err(|e| SnsError::InvalidInput(e.to_string()))?;
        let (alpha, cost, _) = line_search(dynamics, problem, &knots, &step, problem.config.rollouts)?;
        rollouts += 1 + problem.config.rollouts;
        knots = &knots + &(step * alpha);
        costs.push(cost);
        alphas.push(alpha);
    }
    Ok(SolveReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: GGN_METHOD.to_string(),
        knots,
        costs,
        alphas,
        cholesky_status: "ok".into(),
        rollouts_evaluated: rollouts,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Previous solution advanced by one step: each knot takes the old spline's
/// value one step later, clamped at the horizon end.
pub fn warm_start(prev: &SplineControl) -> Array2<f64> {
    let k = prev.knots.nrows();
    let t_max = (prev.horizon - 1) as f64;
    let actions = prev.actions();
    let mut out = Array2::zeros(prev.knots.raw_dim());
    for kappa in 0..k {
        let pos = if k == 1 { 0.0 } else { kappa as f64 * t_max / (k - 1) as f64 };
        let target = (pos + 1.0).min(t_max);
        let lo = target.floor() as usize;
        let hi = (lo + 1).min(prev.horizon - 1);
        let frac = target - lo as f64;
        let row = match prev.kind {
            SplineKind::Linear => &actions.row(lo) * (1.0 - frac) + &actions.row(hi) * frac,
            SplineKind::ZeroOrder => actions.row(lo).to_owned(),
        };
        out.row_mut(kappa).assign(&row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{LinearDynamics, ZeroDrift};
    use ndarray::array;

    #[test]
    fn spline_examples() {
        let c = SplineControl::new(array![[2.0], [2.0], [2.0]], 7, SplineKind::Linear).unwrap();
        assert!(c.actions().iter().all(|v| *v == 2.0));
        let k = array![[1.0], [4.0], [-2.0], [0.5]];
        let id = SplineControl::new(k.clone(), 4, SplineKind::Linear).unwrap();
        assert_eq!(id.actions(), k);
        let two = SplineControl::new(array![[1.0], [3.0]], 5, SplineKind::Linear).unwrap();
        assert_eq!(two.eval(2).unwrap()[0], 2.0);
        assert!(two.eval(5).is_err());
        assert!(SplineControl::new(array![[1.0], [3.0]], 1, SplineKind::Linear).is_err());
        let zoh = SplineControl::new(array![[1.0], [3.0]], 5, SplineKind::ZeroOrder).unwrap();
        assert_eq!(zoh.actions().column(0).to_vec(), vec![1.0, 1.0, 1.0, 1.0, 3.0]);
    }

    #[test]
    fn barrier_examples() {
        let d = 0.01;
        assert!((relaxed_barrier(0.0, d) - 6.10517).abs() < 1e-5);
        let left = -(d as f64).ln();
        assert!((relaxed_barrier(-d, d) - left).abs() < 1e-12);
        assert!((relaxed_barrier(-d - 1e-13, d) - left).abs() < 1e-10);
        assert!((relaxed_barrier_derivative(-d, d) - 1.0 / d).abs() < 1e-9);
        assert!((relaxed_barrier_derivative(-d - 1e-13, d) - 1.0 / d).abs() < 1e-6);
    }

    #[test]
    fn zero_drift_rollout_is_constant() {
        let d = ZeroDrift {
            state_dim: 2,
            action_dim: 1,
            history: 1,
        };
        let init = HistoryWindow::new(array![[0.0, 0.0], [1.0, 2.0]], array![[0.0], [0.0]]).unwrap();
        let states = rollout(&d, &init, array![[1.0], [2.0], [3.0]].view()).unwrap();
        assert!(states.rows().into_iter().all(|r| r[0] == 1.0 && r[1] == 2.0));
    }

    fn lq_problem() -> (LinearDynamics, ShootingProblem) {
        let d = LinearDynamics {
            a: array![[1.0, 0.1], [0.0, 1.0]],
            b: array![[0.005], [0.1]],
            history: 0,
        };
        let horizon = 12;
        let cfg = ProblemConfig {
            horizon,
            knots: 4,
            costs: vec![
                CostTerm::StateTracking {
                    index: 0,
                    reference: vec![1.0; horizon],
                    weight: 1.0,
                    loss: ResidualLoss::Quadratic,
                },
                CostTerm::ActionEffort {
                    index: 0,
                    reference: 0.0,
                    weight: 0.01,
                    loss: ResidualLoss::Quadratic,
                },
            ],
            rollouts: 5,
            iterations: 1,
            ..Default::default()
        };
        let p = ShootingProblem {
            config: cfg,
            initial: HistoryWindow::new(array![[0.0, 0.0]], array![[0.0]]).unwrap(),
            initial_knots: Array2::zeros((4, 1)),
        };
        (d, p)
    }

    #[test]
    fn lq_one_iteration_reaches_optimum() {
        let (d, p) = lq_problem();
        let rep = mpc_solve(&d, &p).unwrap();
        assert_eq!(rep.alphas, vec![1.0]);
        let (_, q, _) = build_ggn(&d, &p, &p.control(rep.knots.clone()).unwrap()).unwrap();
        assert!(q.iter().all(|v| v.abs() < 1e-9));
        assert!(rep.is_monotone());
    }

    #[test]
    fn singular_hessian_is_reported() {
        let h = array![[1.0, 0.0], [0.0, 0.0]];
        match solve_step(&h, &array![1.0, 1.0]) {
            Err(SnsError::Factorization { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected factorization failure, got {other:?}"),
        }
        let eye = Array2::eye(3);
        assert_eq!(solve_step(&eye, &array![1.0, -2.0, 3.0]).unwrap(), array![-1.0, 2.0, -3.0]);
    }

    #[test]
    fn warm_start_shifts_identity_knots() {
        let c = SplineControl::new(array![[1.0], [2.0], [3.0], [4.0]], 4, SplineKind::Linear).unwrap();
        assert_eq!(warm_start(&c), array![[2.0], [3.0], [4.0], [4.0]]);
    }
}
