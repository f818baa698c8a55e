//! Predictor–corrector state estimation over history windows.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::dynamics::{roll_rows, HistoryDynamics};
use crate::error::{Result, SnsError};
use crate::robust_loss::{DispersionStats, LikelihoodKind};
use crate::smooth_net::{MlpGrads, MlpParams, Tape};

/// `(H+1)` rows of states and actions, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryWindow {
    pub x: Array2<f64>,
    pub u: Array2<f64>,
}

impl HistoryWindow {
    pub fn new(x: Array2<f64>, u: Array2<f64>) -> Result<Self> {
        if x.nrows() != u.nrows() || x.nrows() == 0 {
            return Err(SnsError::dims("history window rows", x.nrows(), u.nrows()));
        }
        Ok(HistoryWindow { x, u })
    }

    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn newest_state(&self) -> ArrayView1<'_, f64> {
        self.x.row(self.x.nrows() - 1)
    }

    /// Shift the state rows left by one and append `new_state`.
    pub fn roll(&self, new_state: ArrayView1<f64>) -> Result<HistoryWindow> {
        Ok(HistoryWindow {
            x: roll_rows(self.x.view(), new_state)?,
            u: self.u.clone(),
        })
    }

    pub fn roll_action(&self, new_action: ArrayView1<f64>) -> Result<HistoryWindow> {
        Ok(HistoryWindow {
            x: self.x.clone(),
            u: roll_rows(self.u.view(), new_action)?,
        })
    }
}

/// Partial observation: selected components of the newest state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementMap {
    pub measured: Vec<usize>,
    pub state_dim: usize,
}

impl MeasurementMap {
    pub fn new(measured: Vec<usize>, state_dim: usize) -> Result<Self> {
        if measured.is_empty() || measured.iter().any(|&i| i >= state_dim) {
            return Err(SnsError::InvalidInput("measured indices out of range".into()));
        }
        Ok(MeasurementMap { measured, state_dim })
    }

    pub fn dim(&self) -> usize {
        self.measured.len()
    }

    pub fn unmeasured(&self) -> Vec<usize> {
        (0..self.state_dim).filter(|i| !self.measured.contains(i)).collect()
    }

    pub fn apply(&self, state: ArrayView1<f64>) -> Array1<f64> {
        self.measured.iter().map(|&i| state[i]).collect()
    }
}

/// Prior window: the previous posterior rolled forward by one prediction.
pub fn predict<D: HistoryDynamics + ?Sized>(
    posterior_prev: &HistoryWindow,
    dynamics: &D,
) -> Result<HistoryWindow> {
    let next = dynamics.step(posterior_prev.x.view(), posterior_prev.u.view())?;
    posterior_prev.roll(next.view())
}

/// Prior, innovation `ν = y − h(prior)` and `g_ν = ∂(νᵀν)/∂(X̄_prev, U_prev)`
/// flattened as the row-major state window followed by the action window.
pub fn innovation<D: HistoryDynamics + ?Sized>(
    y: ArrayView1<f64>,
    posterior_prev: &HistoryWindow,
    dynamics: &D,
    h: &MeasurementMap,
) -> Result<(HistoryWindow, Array1<f64>, Array1<f64>)> {
    if y.len() != h.dim() {
        return Err(SnsError::dims("measurement", h.dim(), y.len()));
    }
    let prior = predict(posterior_prev, dynamics)?;
    let nu = &y - &h.apply(prior.newest_state());
    let mut d_next = Array1::zeros(dynamics.state_dim());
    for (k, &i) in h.measured.iter().enumerate() {
        d_next[i] = -2.0 * nu[k];
    }
    let (dx, du) = dynamics.step_vjp(posterior_prev.x.view(), posterior_prev.u.view(), d_next.view())?;
    let g_nu = dx.iter().chain(du.iter()).copied().collect();
    Ok((prior, nu, g_nu))
}

/// Correction network with fixed normalization. Inputs, in order: prior
/// states, actions, measurement history, innovation and its gradient; the
/// output is one correction per unmeasured component per window row, in
/// units of the state scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorModel {
    pub net: MlpParams,
    pub history: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub measurement: MeasurementMap,
    pub kind: LikelihoodKind,
    pub state_stats: DispersionStats,
    pub action_stats: DispersionStats,
    /// dispersion of the measured components' one-step increments
    pub innovation_scale: Vec<f64>,
}

impl EstimatorModel {
    pub fn input_dim_for(history: usize, state_dim: usize, action_dim: usize, meas_dim: usize) -> usize {
        let rows = history + 1;
        rows * state_dim + rows * action_dim + rows * meas_dim + meas_dim + rows * (state_dim + action_dim)
    }

    pub fn output_dim_for(history: usize, state_dim: usize, meas_dim: usize) -> usize {
        (history + 1) * (state_dim - meas_dim)
    }

    pub fn new(
        net: MlpParams,
        history: usize,
        measurement: MeasurementMap,
        kind: LikelihoodKind,
        state_stats: DispersionStats,
        action_stats: DispersionStats,
        innovation_scale: Vec<f64>,
    ) -> Result<Self> {
        let (n, m, p) = (state_stats.dim(), action_stats.dim(), measurement.dim());
        net.validate()?;
        let din = Self::input_dim_for(history, n, m, p);
        if net.input_dim() != din {
            return Err(SnsError::dims("estimator net input", din, net.input_dim()));
        }
        let dout = Self::output_dim_for(history, n, p);
        if net.output_dim() != dout {
            return Err(SnsError::dims("estimator net output", dout, net.output_dim()));
        }
        if innovation_scale.len() != p || innovation_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(SnsError::InvalidInput("innovation scale must be positive per measurement".into()));
        }
        Ok(EstimatorModel {
            net,
            history,
            state_dim: n,
            action_dim: m,
            measurement,
            kind,
            state_stats,
            action_stats,
            innovation_scale,
        })
    }

    /// Normalized inputs `[B × D]`. `g_nu` is `[B × (H+1)(n+m)]` in raw units.
    pub fn encode(
        &self,
        prior: ArrayView3<f64>,
        u: ArrayView3<f64>,
        y: ArrayView3<f64>,
        nu: ArrayView2<f64>,
        g_nu: ArrayView2<f64>,
    ) -> Array2<f64> {
        let b = prior.len_of(Axis(0));
        let (rows, n, m, p) = (self.history + 1, self.state_dim, self.action_dim, self.measurement.dim());
        let (sl, ss) = (self.state_stats.location(self.kind), self.state_stats.scale(self.kind));
        let (al, asc) = (self.action_stats.location(self.kind), self.action_stats.scale(self.kind));
        let gnorm = self.innovation_scale.iter().map(|s| s * s).sum::<f64>() / p as f64;
        let mut out = Array2::zeros((b, Self::input_dim_for(self.history, n, m, p)));
        for (bi, mut row) in out.rows_mut().into_iter().enumerate() {
            let mut c = 0;
            for j in 0..rows {
                for i in 0..n {
                    row[c] = (prior[[bi, j, i]] - sl[i]) / ss[i];
                    c += 1;
                }
            }
            for j in 0..rows {
                for i in 0..m {
                    row[c] = (u[[bi, j, i]] - al[i]) / asc[i];
                    c += 1;
                }
            }
            for j in 0..rows {
                for (k, &i) in self.measurement.measured.iter().enumerate() {
                    row[c] = (y[[bi, j, k]] - sl[i]) / ss[i];
                    c += 1;
                }
            }
            for k in 0..p {
                row[c] = nu[[bi, k]] / self.innovation_scale[k];
                c += 1;
            }
            for j in 0..rows {
                for i in 0..n {
                    row[c] = g_nu[[bi, j * n + i]] * ss[i] / gnorm;
                    c += 1;
                }
            }
            for j in 0..rows {
                for i in 0..m {
                    row[c] = g_nu[[bi, rows * n + j * m + i]] * asc[i] / gnorm;
                    c += 1;
                }
            }
        }
        out
    }

    fn apply_correction(&self, prior: ArrayView3<f64>, y: ArrayView3<f64>, out: &Array2<f64>) -> Array3<f64> {
        let unmeasured = self.measurement.unmeasured();
        let ss = self.state_stats.scale(self.kind);
        let mut post = prior.to_owned();
        let rows = self.history + 1;
        for bi in 0..post.len_of(Axis(0)) {
            for j in 0..rows {
                for (k, &i) in unmeasured.iter().enumerate() {
                    post[[bi, j, i]] += out[[bi, j * unmeasured.len() + k]] * ss[i];
                }
                for (k, &i) in self.measurement.measured.iter().enumerate() {
                    post[[bi, j, i]] = y[[bi, j, k]];
                }
            }
        }
        post
    }

    /// Batched correction keeping the tape for [`EstimatorModel::backward_batch`].
    pub fn correct_batch_tape(
        &self,
        prior: ArrayView3<f64>,
        u: ArrayView3<f64>,
        y: ArrayView3<f64>,
        nu: ArrayView2<f64>,
        g_nu: ArrayView2<f64>,
    ) -> Result<(Array3<f64>, Tape)> {
        let tape = self.net.forward_tape(self.encode(prior, u, y, nu, g_nu).view())?;
        let post = self.apply_correction(prior, y, &tape.output);
        Ok((post, tape))
    }

    pub fn correct_batch(
        &self,
        prior: ArrayView3<f64>,
        u: ArrayView3<f64>,
        y: ArrayView3<f64>,
        nu: ArrayView2<f64>,
        g_nu: ArrayView2<f64>,
    ) -> Result<Array3<f64>> {
        let out = self.net.forward_batch(self.encode(prior, u, y, nu, g_nu).view())?;
        Ok(self.apply_correction(prior, y, &out))
    }

    /// Parameter gradient from the posterior adjoint `[B × (H+1) × n]`.
    /// Inputs are treated as data.
    pub fn backward_batch(&self, tape: &Tape, d_post: ArrayView3<f64>) -> MlpGrads {
        let unmeasured = self.measurement.unmeasured();
        let ss = self.state_stats.scale(self.kind);
        let b = d_post.len_of(Axis(0));
        let rows = self.history + 1;
        let mut d_out = Array2::zeros((b, rows * unmeasured.len()));
        for bi in 0..b {
            for j in 0..rows {
                for (k, &i) in unmeasured.iter().enumerate() {
                    d_out[[bi, j * unmeasured.len() + k]] = d_post[[bi, j, i]] * ss[i];
                }
            }
        }
        self.net
            .backward(tape, d_out.view(), true)
            .0
            .expect("parameter gradients requested")
    }

    /// Single-window correction.
    pub fn correct(
        &self,
        prior: &HistoryWindow,
        y_hist: ArrayView2<f64>,
        nu: ArrayView1<f64>,
        g_nu: ArrayView1<f64>,
    ) -> Result<HistoryWindow> {
        let rows = self.history + 1;
        if prior.rows() != rows || y_hist.nrows() != rows {
            return Err(SnsError::dims("estimator window rows", rows, prior.rows().min(y_hist.nrows())));
        }
        if y_hist.ncols() != self.measurement.dim() || nu.len() != self.measurement.dim() {
            return Err(SnsError::dims("measurement", self.measurement.dim(), nu.len()));
        }
        let gdim = rows * (self.state_dim + self.action_dim);
        if g_nu.len() != gdim {
            return Err(SnsError::dims("innovation gradient", gdim, g_nu.len()));
        }
        let post = self.correct_batch(
            prior.x.view().insert_axis(Axis(0)),
            prior.u.view().insert_axis(Axis(0)),
            y_hist.insert_axis(Axis(0)),
            nu.insert_axis(Axis(0)),
            g_nu.insert_axis(Axis(0)),
        )?;
        Ok(HistoryWindow {
            x: post.index_axis_move(Axis(0), 0),
            u: prior.u.clone(),
        })
    }
}
