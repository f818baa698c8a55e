//! Heavy-tailed and Gaussian likelihood objectives, robust dispersion
//! statistics and the residual-distribution report.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnsError};

/// Smallest admissible dispersion.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// For a Gaussian, `std ≈ MAD_TO_STD · MAD`.
pub const MAD_TO_STD: f64 = 1.4826;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    /// heavy tails; location = median, scale = MAD
    #[default]
    Cauchy,
    /// light tails; location = mean, scale = STD
    Gaussian,
}

impl LikelihoodKind {
    /// Mean per-sample loss over the rows of `z`, where `z` holds residuals
    /// already divided by their dispersion, and its gradient with respect to
    /// `z`. Cauchy rows contribute `((n+1)/2n)·log(1+‖z‖²)`, Gaussian rows
    /// `‖z‖²/2n`.
    pub fn loss_and_grad(self, z: ArrayView2<f64>) -> (f64, Array2<f64>) {
        let (b, n) = z.dim();
        let mut grad = Array2::zeros((b, n));
        if b == 0 || n == 0 {
            return (0.0, grad);
        }
        let nf = n as f64;
        let inv_b = 1.0 / b as f64;
        let mut total = 0.0;
        for (row, mut g) in z.rows().into_iter().zip(grad.rows_mut()) {
            let r2: f64 = row.iter().map(|v| v * v).sum();
            match self {
                LikelihoodKind::Cauchy => {
                    total += 0.5 * (nf + 1.0) / nf * r2.ln_1p();
                    let coef = (nf + 1.0) / nf / (1.0 + r2) * inv_b;
                    g.iter_mut().zip(row).for_each(|(gi, zi)| *gi = coef * zi);
                }
                LikelihoodKind::Gaussian => {
                    total += 0.5 * r2 / nf;
                    let coef = inv_b / nf;
                    g.iter_mut().zip(row).for_each(|(gi, zi)| *gi = coef * zi);
                }
            }
        }
        (total * inv_b, grad)
    }

    pub fn loss(self, z: ArrayView2<f64>) -> f64 {
        self.loss_and_grad(z).0
    }
}

fn check_sigma(sigma: ArrayView1<f64>) -> Result<()> {
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(SnsError::InvalidInput("dispersion must be positive".into()));
    }
    Ok(())
}

fn check_len(context: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(SnsError::dims(context, a, b));
    }
    Ok(())
}

/// `((n+1)/2)·log(1 + Σ ((x−μ)/σ)²)`, additive constants dropped.
pub fn cauchy_nll(x: ArrayView1<f64>, mu: ArrayView1<f64>, sigma: ArrayView1<f64>) -> Result<f64> {
    check_len("cauchy_nll", x.len(), mu.len())?;
    check_len("cauchy_nll", x.len(), sigma.len())?;
    check_sigma(sigma)?;
    let n = x.len() as f64;
    let r2: f64 = (0..x.len()).map(|i| ((x[i] - mu[i]) / sigma[i]).powi(2)).sum();
    Ok(0.5 * (n + 1.0) * r2.ln_1p())
}

/// Gradient of [`cauchy_nll`] with respect to `μ`.
pub fn cauchy_nll_grad_mu(
    x: ArrayView1<f64>,
    mu: ArrayView1<f64>,
    sigma: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    check_len("cauchy_nll", x.len(), mu.len())?;
    check_len("cauchy_nll", x.len(), sigma.len())?;
    check_sigma(sigma)?;
    let n = x.len() as f64;
    let r2: f64 = (0..x.len()).map(|i| ((x[i] - mu[i]) / sigma[i]).powi(2)).sum();
    Ok(Array1::from_shape_fn(x.len(), |i| {
        -(n + 1.0) * (x[i] - mu[i]) / (sigma[i] * sigma[i] * (1.0 + r2))
    }))
}

/// Mean Mahalanobis error `(1/n)·½ Σ ((x−μ)/σ)²`.
pub fn gaussian_mme(x: ArrayView1<f64>, mu: ArrayView1<f64>, sigma: ArrayView1<f64>) -> Result<f64> {
    check_len("gaussian_mme", x.len(), mu.len())?;
    check_len("gaussian_mme", x.len(), sigma.len())?;
    check_sigma(sigma)?;
    let n = x.len() as f64;
    let r2: f64 = (0..x.len()).map(|i| ((x[i] - mu[i]) / sigma[i]).powi(2)).sum();
    Ok(0.5 * r2 / n)
}

pub fn gaussian_mme_grad_mu(
    x: ArrayView1<f64>,
    mu: ArrayView1<f64>,
    sigma: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    check_len("gaussian_mme", x.len(), mu.len())?;
    check_len("gaussian_mme", x.len(), sigma.len())?;
    check_sigma(sigma)?;
    let n = x.len() as f64;
    Ok(Array1::from_shape_fn(x.len(), |i| {
        -(x[i] - mu[i]) / (n * sigma[i] * sigma[i])
    }))
}

/// Per-dimension location and dispersion of a data matrix `[N × n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionStats {
    pub median: Vec<f64>,
    pub mad: Vec<f64>,
    /// MAD (Cauchy path) or STD (Gaussian path), floored at [`SIGMA_FLOOR`]
    pub sigma_hat: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub kind: LikelihoodKind,
}

impl DispersionStats {
    pub fn dim(&self) -> usize {
        self.median.len()
    }

    /// Same statistics, `sigma_hat` recomputed for `kind`.
    pub fn with_kind(&self, kind: LikelihoodKind) -> Self {
        let mut out = self.clone();
        out.kind = kind;
        out.sigma_hat = match kind {
            LikelihoodKind::Cauchy => out.mad.iter().map(|v| v.max(SIGMA_FLOOR)).collect(),
            LikelihoodKind::Gaussian => out.std.iter().map(|v| v.max(SIGMA_FLOOR)).collect(),
        };
        out
    }

    pub fn location(&self, kind: LikelihoodKind) -> &[f64] {
        match kind {
            LikelihoodKind::Cauchy => &self.median,
            LikelihoodKind::Gaussian => &self.mean,
        }
    }

    pub fn scale(&self, kind: LikelihoodKind) -> Vec<f64> {
        match kind {
            LikelihoodKind::Cauchy => self.mad.iter().map(|v| v.max(SIGMA_FLOOR)).collect(),
            LikelihoodKind::Gaussian => self.std.iter().map(|v| v.max(SIGMA_FLOOR)).collect(),
        }
    }

    /// Location/scale for this record's own kind.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        (self.location(self.kind).to_vec(), self.sigma_hat.clone())
    }
}

/// Median with the lower-middle rule for even counts.
pub fn lower_median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values[(values.len() - 1) / 2]
}

/// Median, MAD, mean and population STD of every column.
pub fn median_mad(data: ArrayView2<f64>) -> Result<DispersionStats> {
    let (n_rows, n_cols) = data.dim();
    if n_rows == 0 {
        return Err(SnsError::InvalidInput("median_mad needs at least one row".into()));
    }
    let mut median = Vec::with_capacity(n_cols);
    let mut mad = Vec::with_capacity(n_cols);
    let mut mean = Vec::with_capacity(n_cols);
    let mut std = Vec::with_capacity(n_cols);
    let mut buf = Vec::with_capacity(n_rows);
    for col in data.axis_iter(Axis(1)) {
        buf.clear();
        buf.extend(col.iter().copied());
        let m = lower_median(&mut buf);
        for v in buf.iter_mut() {
            *v = (*v - m).abs();
        }
        let d = lower_median(&mut buf);
        let mu = col.iter().sum::<f64>() / n_rows as f64;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n_rows as f64;
        median.push(m);
        mad.push(d);
        mean.push(mu);
        std.push(var.sqrt());
    }
    let sigma_hat = mad.iter().map(|v| v.max(SIGMA_FLOOR)).collect();
    Ok(DispersionStats {
        median,
        mad,
        sigma_hat,
        mean,
        std,
        kind: LikelihoodKind::Cauchy,
    })
}

/// Cauchy loss with per-dimension `sigma_hat`, averaged over dimensions and
/// batch rows (rows of `x` and `mu` are samples).
pub fn mce(x: ArrayView2<f64>, mu: ArrayView2<f64>, stats: &DispersionStats) -> Result<f64> {
    batch_loss(LikelihoodKind::Cauchy, x, mu, &stats.with_kind(LikelihoodKind::Cauchy).sigma_hat)
}

/// Gaussian counterpart of [`mce`].
pub fn mme(x: ArrayView2<f64>, mu: ArrayView2<f64>, stats: &DispersionStats) -> Result<f64> {
    batch_loss(LikelihoodKind::Gaussian, x, mu, &stats.with_kind(LikelihoodKind::Gaussian).sigma_hat)
}

fn batch_loss(
    kind: LikelihoodKind,
    x: ArrayView2<f64>,
    mu: ArrayView2<f64>,
    sigma: &[f64],
) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(SnsError::InvalidInput("empty batch".into()));
    }
    if x.dim() != mu.dim() {
        return Err(SnsError::dims("batch loss", x.len(), mu.len()));
    }
    check_len("batch loss sigma", x.ncols(), sigma.len())?;
    let mut z = &x - &mu;
    for mut row in z.rows_mut() {
        row.iter_mut().zip(sigma).for_each(|(v, s)| *v /= s);
    }
    Ok(kind.loss(z.view()))
}

/// `(x − location)/scale` elementwise.
pub fn normalize_io(x: ArrayView1<f64>, stats: &DispersionStats, kind: LikelihoodKind) -> Array1<f64> {
    let loc = stats.location(kind);
    let scale = stats.scale(kind);
    Array1::from_shape_fn(x.len(), |i| (x[i] - loc[i]) / scale[i])
}

pub fn denormalize_io(z: ArrayView1<f64>, stats: &DispersionStats, kind: LikelihoodKind) -> Array1<f64> {
    let loc = stats.location(kind);
    let scale = stats.scale(kind);
    Array1::from_shape_fn(z.len(), |i| z[i] * scale[i] + loc[i])
}

/// Average NLL of one residual dimension under three fitted families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualFit {
    pub dimension: usize,
    /// Cauchy(median, MAD)
    pub cauchy_nll: f64,
    /// Normal(mean, std)
    pub gaussian_nll: f64,
    /// Normal(median, 1.4826·MAD)
    pub robust_gaussian_nll: f64,
    /// zero spread; the NLL columns are NaN
    pub degenerate: bool,
}

impl ResidualFit {
    pub fn best(&self) -> Option<&'static str> {
        if self.degenerate {
            return None;
        }
        let c = [
            ("cauchy", self.cauchy_nll),
            ("gaussian", self.gaussian_nll),
            ("robust_gaussian", self.robust_gaussian_nll),
        ];
        c.iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(name, _)| *name)
    }
}

pub const MIN_REPORT_SAMPLES: usize = 30;

/// Per-dimension comparison of residual fits, full normalizing constants kept.
pub fn fit_residual_report(residuals: ArrayView2<f64>) -> Result<Vec<ResidualFit>> {
    let n = residuals.nrows();
    if n < MIN_REPORT_SAMPLES {
        return Err(SnsError::InvalidInput(format!(
            "residual report needs at least {MIN_REPORT_SAMPLES} samples, got {n}"
        )));
    }
    let stats = median_mad(residuals)?;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let ln_pi = std::f64::consts::PI.ln();
    let mut out = Vec::with_capacity(residuals.ncols());
    for (d, col) in residuals.axis_iter(Axis(1)).enumerate() {
        let (med, mad, mean, std) = (stats.median[d], stats.mad[d], stats.mean[d], stats.std[d]);
        if mad <= 0.0 || std <= 0.0 {
            out.push(ResidualFit {
                dimension: d,
                cauchy_nll: f64::NAN,
                gaussian_nll: f64::NAN,
                robust_gaussian_nll: f64::NAN,
                degenerate: true,
            });
            continue;
        }
        let robust_std = MAD_TO_STD * mad;
        let (mut c, mut g, mut r) = (0.0, 0.0, 0.0);
        for &x in col.iter() {
            let zc = (x - med) / mad;
            c += ln_pi + mad.ln() + (zc * zc).ln_1p();
            let zg = (x - mean) / std;
            g += 0.5 * ln_2pi + std.ln() + 0.5 * zg * zg;
            let zr = (x - med) / robust_std;
            r += 0.5 * ln_2pi + robust_std.ln() + 0.5 * zr * zr;
        }
        let nf = n as f64;
        out.push(ResidualFit {
            dimension: d,
            cauchy_nll: c / nf,
            gaussian_nll: g / nf,
            robust_gaussian_nll: r / nf,
            degenerate: false,
        });
    }
    Ok(out)
}

pub const RESIDUAL_REPORT_HEADER: &str = "dimension,cauchy_nll,gaussian_nll,robust_gaussian_nll";

pub fn write_residual_report<W: Write>(rows: &[ResidualFit], mut out: W) -> Result<()> {
    writeln!(out, "{RESIDUAL_REPORT_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.dimension, r.cauchy_nll, r.gaussian_nll, r.robust_gaussian_nll
        )?;
    }
    Ok(())
}
