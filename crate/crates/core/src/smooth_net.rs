//! Smooth neural surrogate MLP.
//!
//! Each layer's weight matrix is rescaled row by row so that its absolute row
//! sums never exceed a learned constant `c = exp(theta_c)`. The product of
//! these constants bounds the network's ∞-norm Lipschitz constant for
//! 1-Lipschitz activations, and `C·S` bounds the Lipschitz constant of the
//! Jacobian.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnsError};
use crate::linalg;

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Tanh,
    Mish,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(z),
            Activation::Tanh => z.tanh(),
            Activation::Mish => z * softplus(z).tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(z),
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Mish => {
                let t = softplus(z).tanh();
                t + z * (1.0 - t * t) * sigmoid(z)
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    /// Value and derivative together; softplus shares one exponential.
    #[inline]
    fn eval_with_derivative(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Softplus => {
                let e = (-z.abs()).exp();
                let value = z.max(0.0) + (1.0 + e).ln();
                let sig = if z >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                (value, sig)
            }
            _ => (self.eval(z), self.derivative(z)),
        }
    }

    /// Global Lipschitz constant of the scalar activation.
    pub fn lipschitz(self) -> f64 {
        match self {
            // max of mish' over the real line
            Activation::Mish => 1.0881,
            _ => 1.0,
        }
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One affine layer with its log Lipschitz scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[out × in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub theta_c: f64,
}

impl Layer {
    pub fn lipschitz_scalar(&self) -> f64 {
        self.theta_c.exp()
    }
}

/// Parameters of one surrogate network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub normalization_enabled: bool,
}

/// Which quantity the bound was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSource {
    /// `exp(theta_c)` of a normalized network
    LearnedConstants,
    /// actual absolute row-sum norms of an unnormalized network
    RowSumNorms,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `C = Π c_ℓ`
    pub c: f64,
    /// `S = Σ_ℓ c_ℓ Π_{j<ℓ} c_j`
    pub s: f64,
    /// `C·S`
    pub jac_bound: f64,
    pub source: BoundSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessOrder {
    First,
    Second,
}

impl SmoothnessOrder {
    pub fn k(self) -> u32 {
        match self {
            SmoothnessOrder::First => 1,
            SmoothnessOrder::Second => 2,
        }
    }
}

/// Smoothness contract: order, budget `B_k` and penalty weight `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothnessBudget {
    pub order: SmoothnessOrder,
    pub budget: f64,
    pub weight: f64,
}

impl SmoothnessBudget {
    pub fn new(order: SmoothnessOrder, budget: f64, weight: f64) -> Result<Self> {
        let b = SmoothnessBudget {
            order,
            budget,
            weight,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0) || !self.budget.is_finite() {
            return Err(SnsError::InvalidInput(format!(
                "smoothness budget must be positive, got {}",
                self.budget
            )));
        }
        if !(self.weight >= 0.0) || !self.weight.is_finite() {
            return Err(SnsError::InvalidInput(format!(
                "smoothness weight must be nonnegative, got {}",
                self.weight
            )));
        }
        Ok(())
    }

    /// Second-order budget matching a first-order one when all `L` layers share
    /// `c_ub^{1/L}`: `d_ub = c_ub · Σ_{ℓ=1}^{L} c_ub^{ℓ/L}`.
    pub fn curvature_budget_from(c_ub: f64, depth: usize) -> f64 {
        let l = depth as f64;
        c_ub * (1..=depth).map(|i| c_ub.powf(i as f64 / l)).sum::<f64>()
    }
}

/// Row-normalized weights: each row is scaled by `min(1, c / Σ_k |W_ik|)`.
pub fn normalize_weights(weight: ArrayView2<f64>, theta_c: f64) -> Result<Array2<f64>> {
    if weight.iter().any(|v| !v.is_finite()) || !theta_c.is_finite() {
        return Err(SnsError::InvalidInput(
            "normalize_weights requires finite weights and theta_c".into(),
        ));
    }
    Ok(NormalizedWeight::new(weight, theta_c).weight)
}

/// Normalized weight plus what its backward pass needs.
#[derive(Debug, Clone)]
struct NormalizedWeight {
    weight: Array2<f64>,
    /// applied row scale, `< 1` only where the row is clipped
    scale: Vec<f64>,
    row_sum: Vec<f64>,
    clipped: Vec<bool>,
}

impl NormalizedWeight {
    fn new(w: ArrayView2<f64>, theta_c: f64) -> Self {
        let c = theta_c.exp();
        let mut out = w.to_owned();
        let mut scale = Vec::with_capacity(w.nrows());
        let mut row_sum = Vec::with_capacity(w.nrows());
        let mut clipped = Vec::with_capacity(w.nrows());
        for mut row in out.rows_mut() {
            let rs: f64 = row.iter().map(|v| v.abs()).sum();
            // the tie rs == c takes the unclipped branch
            let clip = rs > c;
            let s = if clip { c / rs } else { 1.0 };
            if clip {
                row.mapv_inplace(|v| v * s);
            }
            scale.push(s);
            row_sum.push(rs);
            clipped.push(clip);
        }
        NormalizedWeight {
            weight: out,
            scale,
            row_sum,
            clipped,
        }
    }

    fn identity(w: ArrayView2<f64>) -> Self {
        let n = w.nrows();
        NormalizedWeight {
            weight: w.to_owned(),
            scale: vec![1.0; n],
            row_sum: vec![0.0; n],
            clipped: vec![false; n],
        }
    }

    /// Pulls `dL/dŴ` back to `(dL/dW, dL/dθ)`.
    fn backward(&self, w: ArrayView2<f64>, theta_c: f64, g: &Array2<f64>) -> (Array2<f64>, f64) {
        let c = theta_c.exp();
        let mut dw = g.clone();
        let mut dtheta = 0.0;
        for i in 0..w.nrows() {
            if !self.clipped[i] {
                continue;
            }
            let s = self.scale[i];
            let rs = self.row_sum[i];
            let gw: f64 = g.row(i).iter().zip(w.row(i)).map(|(a, b)| a * b).sum();
            let coef = c * gw / (rs * rs);
            for (d, (&gi, &wi)) in dw.row_mut(i).iter_mut().zip(g.row(i).iter().zip(w.row(i))) {
                let sign = if wi > 0.0 {
                    1.0
                } else if wi < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *d = s * gi - coef * sign;
            }
            dtheta += s * gw;
        }
        (dw, dtheta)
    }
}

/// Activations recorded by [`MlpParams::forward_tape`].
#[derive(Debug, Clone)]
pub struct Tape {
    weights: Vec<NormalizedWeight>,
    /// input to each layer, `inputs[0]` is the network input
    inputs: Vec<Array2<f64>>,
    /// activation derivative at each hidden layer's pre-activation
    act_grad: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Gradient record with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub theta_c: f64,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                    theta_c: 0.0,
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        self.add_scaled(other, 1.0);
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, alpha: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(alpha, &b.weight);
            a.bias.scaled_add(alpha, &b.bias);
            a.theta_c += alpha * b.theta_c;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for l in &mut self.layers {
            l.weight *= alpha;
            l.bias *= alpha;
            l.theta_c *= alpha;
        }
    }

    pub fn add_theta(&mut self, dtheta: &[f64]) {
        for (l, d) in self.layers.iter_mut().zip(dtheta) {
            l.theta_c += d;
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
            out.push(l.theta_c);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.theta_c.is_finite()
                && l.weight.iter().all(|v| v.is_finite())
                && l.bias.iter().all(|v| v.is_finite())
        })
    }
}

/// Both halves of the empirical Lipschitz probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalLipschitz {
    /// max `‖f(a)−f(b)‖∞ / ‖a−b‖∞` over the sampled pairs
    pub pair_ratio: f64,
    /// max operator ∞-norm of the sampled input Jacobians
    pub jacobian_norm: f64,
}

impl EmpiricalLipschitz {
    pub fn max(&self) -> f64 {
        self.pair_ratio.max(self.jacobian_norm)
    }
}

/// Axis-aligned box used as the probe's input distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputBox {
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        InputBox {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            for j in 0..d {
                row[j] = self.lo[j] + (self.hi[j] - self.lo[j]) * rng.random::<f64>();
            }
        }
        out
    }

    /// Pairs `(a, b)`: every other pair is local (`b` near `a`, log-uniform
    /// radius), the rest are independent draws.
    pub fn sample_pairs<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        n: usize,
    ) -> (Array2<f64>, Array2<f64>) {
        let a = self.sample(rng, n);
        let mut b = self.sample(rng, n);
        for i in (0..n).step_by(2) {
            let r = (-6.0 * rng.random::<f64>()).exp();
            for j in 0..self.dim() {
                let width = self.hi[j] - self.lo[j];
                let dir = 2.0 * rng.random::<f64>() - 1.0;
                b[[i, j]] = (a[[i, j]] + r * width * dir).clamp(self.lo[j], self.hi[j]);
            }
        }
        (a, b)
    }
}

impl MlpParams {
    /// Fan-in scaled uniform weights; each `theta_c` starts at the log of its
    /// layer's largest row sum so the network begins unclipped.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        activation: Activation,
        normalization_enabled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(SnsError::InvalidInput(format!(
                "network needs at least input and output widths, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let bias_bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    bound * (2.0 * rng.random::<f64>() - 1.0)
                });
                let bias =
                    Array1::from_shape_fn(fan_out, |_| bias_bound * (2.0 * rng.random::<f64>() - 1.0));
                let max_row = linalg::inf_norm(weight.view()).max(1e-12);
                let mut theta_c = max_row.ln();
                while theta_c.exp() < max_row {
                    theta_c = theta_c.next_up();
                }
                Layer {
                    weight,
                    bias,
                    theta_c,
                }
            })
            .collect();
        let p = MlpParams {
            layers,
            activation,
            normalization_enabled,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(SnsError::InvalidInput("network has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(SnsError::dims("layer bias", l.weight.nrows(), l.bias.len()));
            }
            if i > 0 {
                let prev = self.layers[i - 1].weight.nrows();
                if l.weight.ncols() != prev {
                    return Err(SnsError::dims("layer chaining", prev, l.weight.ncols()));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.nrows()).unwrap_or(0)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len() + 1)
            .sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
            out.push(l.theta_c);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(SnsError::dims("flat parameters", self.num_params(), flat.len()));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for v in l.weight.iter_mut() {
                *v = it.next().unwrap_or_default();
            }
            for v in l.bias.iter_mut() {
                *v = it.next().unwrap_or_default();
            }
            l.theta_c = it.next().unwrap_or_default();
        }
        Ok(())
    }

    fn normalized(&self, layer: &Layer) -> NormalizedWeight {
        if self.normalization_enabled {
            NormalizedWeight::new(layer.weight.view(), layer.theta_c)
        } else {
            NormalizedWeight::identity(layer.weight.view())
        }
    }

    /// The weights actually used on the forward pass.
    pub fn effective_weights(&self) -> Vec<Array2<f64>> {
        self.layers.iter().map(|l| self.normalized(l).weight).collect()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let batch = x.insert_axis(Axis(0));
        Ok(self.forward_batch(batch)?.row(0).to_owned())
    }

    /// Rows of `x` are independent inputs.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = self.normalized(layer).weight;
            let mut z = a.dot(&w.t());
            z += &layer.bias;
            if i < last {
                let act = self.activation;
                z.mapv_inplace(|v| act.eval(v));
            }
            a = z;
        }
        Ok(a)
    }

    fn check_input(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(SnsError::dims("network input", self.input_dim(), got));
        }
        Ok(())
    }

    /// Forward pass that records what [`MlpParams::backward`] needs.
    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.check_input(x.ncols())?;
        let last = self.layers.len() - 1;
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut act_grad = Vec::with_capacity(last);
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let nw = self.normalized(layer);
            let mut z = a.dot(&nw.weight.t());
            z += &layer.bias;
            inputs.push(a);
            if i < last {
                let act = self.activation;
                let mut d = Array2::zeros(z.raw_dim());
                Zip::from(&mut z).and(&mut d).for_each(|zv, dv| {
                    let (v, g) = act.eval_with_derivative(*zv);
                    *zv = v;
                    *dv = g;
                });
                act_grad.push(d);
            }
            weights.push(nw);
            a = z;
        }
        Ok(Tape {
            weights,
            inputs,
            act_grad,
            output: a,
        })
    }

    /// Reverse pass for output adjoint `d_out` (`[batch × out]`). Returns the
    /// parameter gradient (summed over the batch) when requested, and the
    /// input adjoint `[batch × in]`.
    pub fn backward(
        &self,
        tape: &Tape,
        d_out: ArrayView2<f64>,
        want_params: bool,
    ) -> (Option<MlpGrads>, Array2<f64>) {
        let n = self.layers.len();
        let mut grads = if want_params {
            Some(MlpGrads::zeros_like(self))
        } else {
            None
        };
        let mut gz = d_out.to_owned();
        for i in (0..n).rev() {
            let nw = &tape.weights[i];
            if let Some(g) = grads.as_mut() {
                let dw_hat = gz.t().dot(&tape.inputs[i]);
                let db = gz.sum_axis(Axis(0));
                let layer = &self.layers[i];
                let (dw, dtheta) = if self.normalization_enabled {
                    nw.backward(layer.weight.view(), layer.theta_c, &dw_hat)
                } else {
                    (dw_hat, 0.0)
                };
                g.layers[i] = LayerGrad {
                    weight: dw,
                    bias: db,
                    theta_c: dtheta,
                };
            }
            let mut ga = gz.dot(&nw.weight);
            if i > 0 {
                ga *= &tape.act_grad[i - 1];
            }
            gz = ga;
        }
        (grads, gz)
    }

    /// Exact input Jacobian `[out × in]` at `x`, normalized weights held fixed.
    pub fn input_jacobian(&self, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        let batch = self.input_jacobians(x.insert_axis(Axis(0)))?;
        Ok(batch.into_iter().next().unwrap_or_else(|| Array2::zeros((0, 0))))
    }

    /// Input Jacobians at every row of `x`, one backward pass per output.
    pub fn input_jacobians(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        let tape = self.forward_tape(x)?;
        let (b, nin, nout) = (x.nrows(), self.input_dim(), self.output_dim());
        let mut jacs = vec![Array2::zeros((nout, nin)); b];
        for o in 0..nout {
            let mut seed = Array2::zeros((b, nout));
            seed.column_mut(o).fill(1.0);
            let (_, dx) = self.backward(&tape, seed.view(), false);
            for (j, row) in jacs.iter_mut().zip(dx.rows()) {
                j.row_mut(o).assign(&row);
            }
        }
        Ok(jacs)
    }

    /// Per-layer constants entering the bound.
    pub fn layer_constants(&self) -> (Vec<f64>, BoundSource) {
        if self.normalization_enabled {
            (
                self.layers.iter().map(|l| l.theta_c.exp()).collect(),
                BoundSource::LearnedConstants,
            )
        } else {
            (
                self.layers
                    .iter()
                    .map(|l| linalg::inf_norm(l.weight.view()))
                    .collect(),
                BoundSource::RowSumNorms,
            )
        }
    }

    pub fn lipschitz_bound(&self) -> BoundReport {
        let (cs, source) = self.layer_constants();
        let (c, s) = product_and_propagated(&cs);
        BoundReport {
            c,
            s,
            jac_bound: c * s,
            source,
        }
    }

    /// `λ·max(1, C·S^{k−1}/B_k)`.
    pub fn smoothness_penalty(&self, budget: &SmoothnessBudget) -> f64 {
        self.smoothness_penalty_with_grad(budget).0
    }

    /// Penalty and its gradient with respect to each `theta_c`. For an
    /// unnormalized network the gradient is zero: its bound is not a function
    /// of `theta_c`.
    pub fn smoothness_penalty_with_grad(&self, budget: &SmoothnessBudget) -> (f64, Vec<f64>) {
        let n = self.layers.len();
        let report = self.lipschitz_bound();
        let ratio = match budget.order {
            SmoothnessOrder::First => report.c / budget.budget,
            SmoothnessOrder::Second => report.jac_bound / budget.budget,
        };
        let mut grad = vec![0.0; n];
        if ratio <= 1.0 || !self.normalization_enabled || budget.weight == 0.0 {
            return (budget.weight * ratio.max(1.0), grad);
        }
        let penalty = budget.weight * ratio;
        let scale = budget.weight / budget.budget;
        match budget.order {
            // dC/dθ_m = C for every m
            SmoothnessOrder::First => grad.iter_mut().for_each(|g| *g = scale * report.c),
            SmoothnessOrder::Second => {
                // S = Σ_ℓ exp(Σ_{j≤ℓ} θ_j), so dS/dθ_m = Σ_{ℓ≥m} exp(Σ_{j≤ℓ} θ_j)
                let mut partial = Vec::with_capacity(n);
                let mut acc = 0.0;
                for l in &self.layers {
                    acc += l.theta_c;
                    partial.push(acc.exp());
                }
                let mut tail = 0.0;
                for m in (0..n).rev() {
                    tail += partial[m];
                    grad[m] = scale * (report.c * report.s + report.c * tail);
                }
            }
        }
        (penalty, grad)
    }

    /// Lower-bound probe of the Lipschitz constant over `region`.
    pub fn empirical_lipschitz<R: Rng + ?Sized>(
        &self,
        region: &InputBox,
        n_pairs: usize,
        rng: &mut R,
    ) -> Result<EmpiricalLipschitz> {
        if n_pairs == 0 {
            return Err(SnsError::InvalidInput("n_pairs must be at least 1".into()));
        }
        self.check_input(region.dim())?;
        let (a, b) = region.sample_pairs(rng, n_pairs);
        let fa = self.forward_batch(a.view())?;
        let fb = self.forward_batch(b.view())?;
        let mut pair_ratio: f64 = 0.0;
        for i in 0..n_pairs {
            let dx = inf_dist(a.row(i), b.row(i));
            if dx <= 0.0 {
                continue;
            }
            pair_ratio = pair_ratio.max(inf_dist(fa.row(i), fb.row(i)) / dx);
        }
        let jacobian_norm = self
            .input_jacobians(a.view())?
            .iter()
            .map(|j| linalg::inf_norm(j.view()))
            .fold(0.0, f64::max);
        Ok(EmpiricalLipschitz {
            pair_ratio,
            jacobian_norm,
        })
    }
}

/// `(Π c_ℓ, Σ_ℓ c_ℓ Π_{j<ℓ} c_j)` in layer order.
pub fn product_and_propagated(cs: &[f64]) -> (f64, f64) {
    let mut prefix = 1.0;
    let mut s = 0.0;
    for &c in cs {
        prefix *= c;
        s += prefix;
    }
    (prefix, s)
}

fn inf_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
