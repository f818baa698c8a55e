//! Dynamics over fixed-length state/action histories: the learned surrogate
//! and a few reference models.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnsError};
use crate::robust_loss::{DispersionStats, LikelihoodKind};
use crate::smooth_net::{MlpGrads, MlpParams, Tape};
use crate::tasks::{particle_step, ParticleConfig, ParticleState};

/// `x_{t+1} = f(X_t, U_t)` with windows of `H+1` rows, oldest first.
pub trait HistoryDynamics: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn history(&self) -> usize;

    fn step(&self, x: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>>;

    /// Next state with its Jacobians with respect to the row-major flattened
    /// state window `[n × (H+1)n]` and action window `[n × (H+1)m]`.
    fn step_jacobian(&self, x: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)>;

    /// Pullback of `d_next` to the windows.
    fn step_vjp(&self, x: ArrayView2<f64>, u: ArrayView2<f64>, d_next: ArrayView1<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (_, jx, ju) = self.step_jacobian(x, u)?;
        let dx = jx.t().dot(&d_next).into_shape_with_order(x.raw_dim()).map_err(shape_err)?;
        let du = ju.t().dot(&d_next).into_shape_with_order(u.raw_dim()).map_err(shape_err)?;
        Ok((dx, du))
    }

    /// Steps a batch of windows `[B × (H+1) × ·]`, returning `[B × n]`.
    fn step_batch(&self, x: ArrayView3<f64>, u: ArrayView3<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.len_of(Axis(0)), self.state_dim()));
        for (b, mut row) in out.rows_mut().into_iter().enumerate() {
            row.assign(&self.step(x.index_axis(Axis(0), b), u.index_axis(Axis(0), b))?);
        }
        Ok(out)
    }

    fn check_windows(&self, x: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<()> {
        let rows = self.history() + 1;
        if x.nrows() != rows || u.nrows() != rows {
            return Err(SnsError::dims("history window rows", rows, x.nrows().min(u.nrows())));
        }
        if x.ncols() != self.state_dim() {
            return Err(SnsError::dims("state window", self.state_dim(), x.ncols()));
        }
        if u.ncols() != self.action_dim() {
            return Err(SnsError::dims("action window", self.action_dim(), u.ncols()));
        }
        Ok(())
    }
}

fn shape_err(e: ndarray::ShapeError) -> SnsError {
    SnsError::InvalidInput(e.to_string())
}

/// Drops the oldest row and appends `new_row`.
pub fn roll_rows(window: ArrayView2<f64>, new_row: ArrayView1<f64>) -> Result<Array2<f64>> {
    if new_row.len() != window.ncols() {
        return Err(SnsError::dims("rolled row", window.ncols(), new_row.len()));
    }
    let n = window.nrows();
    let mut out = Array2::zeros(window.raw_dim());
    if n == 0 {
        return Ok(out);
    }
    out.slice_mut(s![..n - 1, ..]).assign(&window.slice(s![1.., ..]));
    out.row_mut(n - 1).assign(&new_row);
    Ok(out)
}

/// Learned surrogate in residual form,
/// `x_{t+1} = x_t + loc + scale ⊙ net(normalized X_t, normalized U_t)`,
/// where `loc`/`scale` describe the one-step increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    pub net: MlpParams,
    pub history: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub kind: LikelihoodKind,
    pub state_stats: DispersionStats,
    pub action_stats: DispersionStats,
    pub increment_stats: DispersionStats,
}

impl DynamicsModel {
    pub fn input_dim_for(history: usize, state_dim: usize, action_dim: usize) -> usize {
        (history + 1) * (state_dim + action_dim)
    }

    pub fn new(
        net: MlpParams,
        history: usize,
        kind: LikelihoodKind,
        state_stats: DispersionStats,
        action_stats: DispersionStats,
        increment_stats: DispersionStats,
    ) -> Result<Self> {
        let (n, m) = (state_stats.dim(), action_stats.dim());
        net.validate()?;
        if net.input_dim() != Self::input_dim_for(history, n, m) {
            return Err(SnsError::dims("dynamics net input", Self::input_dim_for(history, n, m), net.input_dim()));
        }
        if net.output_dim() != n || increment_stats.dim() != n {
            return Err(SnsError::dims("dynamics net output", n, net.output_dim()));
        }
        Ok(DynamicsModel {
            net,
            history,
            state_dim: n,
            action_dim: m,
            kind,
            state_stats,
            action_stats,
            increment_stats,
        })
    }

    pub fn output_location(&self) -> &[f64] {
        self.increment_stats.location(self.kind)
    }

    /// Dispersion of the one-step increments; the scale of every dynamics loss.
    pub fn output_scale(&self) -> Vec<f64> {
        self.increment_stats.scale(self.kind)
    }

    /// Normalized network inputs `[B × (H+1)(n+m)]`.
    pub fn encode(&self, x: ArrayView3<f64>, u: ArrayView3<f64>) -> Array2<f64> {
        let b = x.len_of(Axis(0));
        let (rows, n, m) = (self.history + 1, self.state_dim, self.action_dim);
        let (sl, ss) = (self.state_stats.location(self.kind), self.state_stats.scale(self.kind));
        let (al, asc) = (self.action_stats.location(self.kind), self.action_stats.scale(self.kind));
        let mut out = Array2::zeros((b, rows * (n + m)));
        for (bi, mut row) in out.rows_mut().into_iter().enumerate() {
            for j in 0..rows {
                for i in 0..n {
                    row[j * n + i] = (x[[bi, j, i]] - sl[i]) / ss[i];
                }
                for i in 0..m {
                    row[rows * n + j * m + i] = (u[[bi, j, i]] - al[i]) / asc[i];
                }
            }
        }
        out
    }

    fn decode(&self, x: ArrayView3<f64>, out: &Array2<f64>) -> Array2<f64> {
        let (loc, scale) = (self.output_location(), self.output_scale());
        let newest = x.index_axis(Axis(1), self.history);
        let mut next = out.clone();
        for (mut r, base) in next.rows_mut().into_iter().zip(newest.rows()) {
            for i in 0..self.state_dim {
                r[i] = base[i] + loc[i] + scale[i] * r[i];
            }
        }
        next
    }

    pub fn predict_batch(&self, x: ArrayView3<f64>, u: ArrayView3<f64>) -> Result<Array2<f64>> {
        let out = self.net.forward_batch(self.encode(x, u).view())?;
        Ok(self.decode(x, &out))
    }

    /// Batched prediction keeping the tape for [`DynamicsModel::backward_batch`].
    pub fn predict_batch_tape(&self, x: ArrayView3<f64>, u: ArrayView3<f64>) -> Result<(Array2<f64>, Tape)> {
        let tape = self.net.forward_tape(self.encode(x, u).view())?;
        let next = self.decode(x, &tape.output);
        Ok((next, tape))
    }

    /// Pulls `d_next [B × n]` back to the parameters (when requested) and the
    /// state and action windows, residual path included.
    pub fn backward_batch(
        &self,
        tape: &Tape,
        d_next: ArrayView2<f64>,
        want_params: bool,
    ) -> (Option<MlpGrads>, Array3<f64>, Array3<f64>) {
        let scale = self.output_scale();
        let mut d_out = d_next.to_owned();
        for mut r in d_out.rows_mut() {
            r.iter_mut().zip(&scale).for_each(|(v, s)| *v *= s);
        }
        let (grads, d_in) = self.net.backward(tape, d_out.view(), want_params);
        let b = d_next.nrows();
        let (rows, n, m) = (self.history + 1, self.state_dim, self.action_dim);
        let ss = self.state_stats.scale(self.kind);
        let asc = self.action_stats.scale(self.kind);
        let mut dx = Array3::zeros((b, rows, n));
        let mut du = Array3::zeros((b, rows, m));
        for bi in 0..b {
            for j in 0..rows {
                for i in 0..n {
                    dx[[bi, j, i]] = d_in[[bi, j * n + i]] / ss[i];
                }
                for i in 0..m {
                    du[[bi, j, i]] = d_in[[bi, rows * n + j * m + i]] / asc[i];
                }
            }
            for i in 0..n {
                dx[[bi, rows - 1, i]] += d_next[[bi, i]];
            }
        }
        (grads, dx, du)
    }
}

impl HistoryDynamics for DynamicsModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn history(&self) -> usize {
        self.history
    }

    fn step(&self, x: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_windows(x, u)?;
        let next = self.predict_batch(x.insert_axis(Axis(0)), u.insert_axis(Axis(0)))?;
        Ok(next.row(0).to_owned())
    }

    fn step_jacobian(&self, x: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
        self.check_windows(x, u)?;
        let x3 = x.insert_axis(Axis(0));
        let u3 = u.insert_axis(Axis(0));
        let input = self.encode(x3, u3);
        let jn = self.net.input_jacobian(input.row(0))?;
        let out = self.net.forward_batch(input.view())?;
        let next = self.decode(x3, &out).row(0).to_owned();
        let (rows, n, m) = (self.history + 1, self.state_dim, self.action_dim);
        let scale = self.output_scale();
        let ss = self.state_stats.scale(self.kind);
        let asc = self.action_stats.scale(self.kind);
        let mut jx = Array2::zeros((n, rows * n));
        let mut ju = Array2::zeros((n, rows * m));
        for o in 0..n {
            for j in 0..rows {
                for i in 0..n {
                    jx[[o, j * n + i]] = scale[o] * jn[[o, j * n + i]] / ss[i];
                }
                for i in 0..m {
                    ju[[o, j * m + i]] = scale[o] * jn[[o, rows * n + j * m + i]] / asc[i];
                }
            }
            jx[[o, (rows - 1) * n + o]] += 1.0;
        }
        Ok((next, jx, ju))
    }

    fn step_vjp(&self, x: ArrayView2<f64>, u: ArrayView2<f64>, d_next: ArrayView1<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_windows(x, u)?;
        let (_, tape) = self.predict_batch_tape(x.insert_axis(Axis(0)), u.insert_axis(Axis(0)))?;
        let (_, dx, du) = self.backward_batch(&tape, d_next.insert_axis(Axis(0)), false);
        Ok((dx.index_axis_move(Axis(0), 0), du.index_axis_move(Axis(0), 0)))
    }

    fn step_batch(&self, x: ArrayView3<f64>, u: ArrayView3<f64>) -> Result<Array2<f64>> {
        self.predict_batch(x, u)
    }
}

/// The exact particle simulator; older window rows are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleDynamics {
    pub config: ParticleConfig,
    pub history: usize,
}

impl HistoryDynamics for ParticleDynamics {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn history(&self) -> usize {
        self.history
    }

    fn step(&self, x: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_windows(x, u)?;
        let h = self.history;
        let s = ParticleState {
            q: x[[h, 0]],
            v: x[[h, 1]],
        };
        Ok(Array1::from(particle_step(s, u[[h, 0]], &self.config).to_array().to_vec()))
    }

    fn step_jacobian(&self, x: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
        let next = self.step(x, u)?;
        let h = self.history;
        let dt = self.config.dt;
        let mut jx = Array2::zeros((2, (h + 1) * 2));
        let mut ju = Array2::zeros((2, h + 1));
        if next[0] > 0.0 {
            jx[[0, 2 * h]] = 1.0;
            jx[[0, 2 * h + 1]] = dt;
            jx[[1, 2 * h + 1]] = 1.0;
            ju[[0, h]] = dt * dt;
            ju[[1, h]] = dt;
        }
        Ok((next, jx, ju))
    }
}

/// `x' = A x + B u` on the newest rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDynamics {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub history: usize,
}

impl HistoryDynamics for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    fn history(&self) -> usize {
        self.history
    }

    fn step(&self, x: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_windows(x, u)?;
        let h = self.history;
        Ok(self.a.dot(&x.row(h)) + self.b.dot(&u.row(h)))
    }

    fn step_jacobian(&self, x: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
        let next = self.step(x, u)?;
        let (h, n, m) = (self.history, self.state_dim(), self.action_dim());
        let mut jx = Array2::zeros((n, (h + 1) * n));
        let mut ju = Array2::zeros((n, (h + 1) * m));
        jx.slice_mut(s![.., h * n..]).assign(&self.a);
        ju.slice_mut(s![.., h * m..]).assign(&self.b);
        Ok((next, jx, ju))
    }
}

/// Holds the newest state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroDrift {
    pub state_dim: usize,
    pub action_dim: usize,
    pub history: usize,
}

impl HistoryDynamics for ZeroDrift {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn history(&self) -> usize {
        self.history
    }

    fn step(&self, x: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_windows(x, u)?;
        Ok(x.row(self.history).to_owned())
    }

    fn step_jacobian(&self, x: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
        let next = self.step(x, u)?;
        let (h, n, m) = (self.history, self.state_dim, self.action_dim);
        let mut jx = Array2::zeros((n, (h + 1) * n));
        for i in 0..n {
            jx[[i, h * n + i]] = 1.0;
        }
        Ok((next, jx, Array2::zeros((n, (h + 1) * m))))
    }
}
