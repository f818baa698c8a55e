//! Benchmark generators: 1-D targets, 2-D shape SDFs and the particle–mass
//! contact system.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnsError};

/// Piecewise target with a jump at `x = 1`, flat plateaus, a quadratic bowl
/// and a linear tail fixed by continuity at `2.2` and `f(5) = 1`.
pub fn piecewise_fn(x: f64) -> f64 {
    if x < -3.0 {
        -0.6 * x - 2.0
    } else if x < 1.0 {
        -0.2
    } else if x < 1.3 {
        -0.6
    } else if x < 2.2 {
        -0.6 + 0.8 * (x - 1.3).powi(2)
    } else {
        let (m, b) = piecewise_tail();
        m * x + b
    }
}

/// Slope and intercept of the last segment.
pub fn piecewise_tail() -> (f64, f64) {
    let at_knot = -0.6 + 0.8 * (2.2f64 - 1.3).powi(2);
    let m = (1.0 - at_knot) / (5.0 - 2.2);
    (m, 1.0 - 5.0 * m)
}

pub fn relu_target(x: f64) -> f64 {
    x.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
}

pub const SHAPE_HALF_EXTENT: f64 = 0.6;

/// Exact signed distance: circle of radius 0.6, or axis-aligned square of
/// half-width 0.6, both centered at the origin.
pub fn shape_sdf(shape: Shape, x: f64, y: f64) -> f64 {
    match shape {
        Shape::Circle => x.hypot(y) - SHAPE_HALF_EXTENT,
        Shape::Square => {
            let qx = x.abs() - SHAPE_HALF_EXTENT;
            let qy = y.abs() - SHAPE_HALF_EXTENT;
            qx.max(0.0).hypot(qy.max(0.0)) + qx.max(qy).min(0.0)
        }
    }
}

/// Uniform samples of `f` over `[lo, hi]`; `lo == hi` gives a constant input.
pub fn sample_fn_dataset<F: Fn(f64) -> f64>(
    f: F,
    n: usize,
    range: (f64, f64),
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = range;
    let xs: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    let ys = xs.iter().map(|&x| f(x)).collect();
    (xs, ys)
}

/// `(x, y, z) → sdf` samples; `z = 0` is the circle and `z = 1` the square.
pub fn shape_interp_dataset(n_per_shape: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Array2::zeros((2 * n_per_shape, 3));
    let mut targets = Array2::zeros((2 * n_per_shape, 1));
    for (k, shape) in [Shape::Circle, Shape::Square].into_iter().enumerate() {
        for i in 0..n_per_shape {
            let row = k * n_per_shape + i;
            let x = 2.0 * rng.random::<f64>() - 1.0;
            let y = 2.0 * rng.random::<f64>() - 1.0;
            inputs[[row, 0]] = x;
            inputs[[row, 1]] = y;
            inputs[[row, 2]] = k as f64;
            targets[[row, 0]] = shape_sdf(shape, x, y);
        }
    }
    (inputs, targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    /// height [m], ground at 0
    pub q: f64,
    /// vertical velocity [m/s]
    pub v: f64,
}

impl ParticleState {
    pub fn to_array(self) -> [f64; 2] {
        [self.q, self.v]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleConfig {
    pub g: f64,
    pub dt: f64,
    pub episode_seconds: f64,
    /// forcing amplitude in units of `g`
    pub forcing_gain: f64,
    pub omega_range: (f64, f64),
    pub q0_range: (f64, f64),
    pub v0_range: (f64, f64),
}

impl Default for ParticleConfig {
    fn default() -> Self {
        ParticleConfig {
            g: 9.81,
            dt: 0.02,
            episode_seconds: 6.0,
            forcing_gain: 2.0,
            omega_range: (0.1, 3.0),
            q0_range: (0.1, 4.0),
            v0_range: (-5.0, 5.0),
        }
    }
}

impl ParticleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.episode_seconds > 0.0) {
            return Err(SnsError::Config("particle dt and episode length must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_episode(&self) -> usize {
        (self.episode_seconds / self.dt).round() as usize
    }

    /// Sinusoidal forcing `u_t = gain·g·sin(2π ω t)`.
    pub fn forcing(&self, omega: f64, step: usize) -> f64 {
        let t = step as f64 * self.dt;
        self.forcing_gain * self.g * (2.0 * std::f64::consts::PI * omega * t).sin()
    }
}

/// Semi-implicit Euler on `q̈ = −g + u` with a fully inelastic ground at 0.
pub fn particle_step(s: ParticleState, u: f64, cfg: &ParticleConfig) -> ParticleState {
    let v = s.v + (-cfg.g + u) * cfg.dt;
    let q = s.q + v * cfg.dt;
    if q <= 0.0 {
        ParticleState { q: 0.0, v: 0.0 }
    } else {
        ParticleState { q, v }
    }
}

/// One recorded trajectory: `states` and `measurements` have one more row
/// than `actions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub measurements: Array2<f64>,
    pub seed: u64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.nrows() == 0
    }
}

/// Random initial state and sinusoidal forcing frequency for the particle.
pub fn sample_particle_start<R: Rng + ?Sized>(cfg: &ParticleConfig, rng: &mut R) -> (ParticleState, f64) {
    let q = cfg.q0_range.0 + (cfg.q0_range.1 - cfg.q0_range.0) * rng.random::<f64>();
    let v = cfg.v0_range.0 + (cfg.v0_range.1 - cfg.v0_range.0) * rng.random::<f64>();
    let omega = cfg.omega_range.0 + (cfg.omega_range.1 - cfg.omega_range.0) * rng.random::<f64>();
    (ParticleState { q, v }, omega)
}

/// Per-trajectory generator: stream `index` of the dataset seed.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn simulate_particle_forced(cfg: &ParticleConfig, start: ParticleState, omega: f64, seed: u64) -> Episode {
    let n = cfg.steps_per_episode();
    let mut states = Array2::zeros((n + 1, 2));
    let mut actions = Array2::zeros((n, 1));
    let mut s = start;
    for t in 0..n {
        states.row_mut(t).assign(&ndarray::arr1(&s.to_array()));
        let u = cfg.forcing(omega, t);
        actions[[t, 0]] = u;
        s = particle_step(s, u, cfg);
    }
    states.row_mut(n).assign(&ndarray::arr1(&s.to_array()));
    let measurements = states.slice(s![.., 0..1]).to_owned();
    Episode {
        states,
        actions,
        measurements,
        seed,
    }
}

/// `n_traj` forced trajectories; trajectory `i` uses its own derived stream.
pub fn generate_particle_dataset(cfg: &ParticleConfig, n_traj: usize, seed: u64) -> Result<Vec<Episode>> {
    cfg.validate()?;
    if n_traj == 0 {
        return Err(SnsError::InvalidInput("n_traj must be at least 1".into()));
    }
    Ok((0..n_traj)
        .map(|i| {
            let mut rng = trajectory_rng(seed, i as u64);
            let (start, omega) = sample_particle_start(cfg, &mut rng);
            simulate_particle_forced(cfg, start, omega, seed)
        })
        .collect())
}

pub fn total_transitions(episodes: &[Episode]) -> usize {
    episodes.iter().map(Episode::len).sum()
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// JSON sidecar describing a flat little-endian `f64` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub state_dim: usize,
    pub action_dim: usize,
    pub measurement_dim: usize,
    pub dt: f64,
    pub seed: u64,
    pub n_trajectories: usize,
    /// transitions per trajectory
    pub lengths: Vec<usize>,
    pub n_transitions: usize,
}

/// Writes `<stem>.json` and `<stem>.bin`. Each trajectory is stored as its
/// states, then actions, then measurements, row-major.
pub fn write_dataset(stem: &Path, episodes: &[Episode], dt: f64, seed: u64) -> Result<DatasetHeader> {
    let first = episodes
        .first()
        .ok_or_else(|| SnsError::InvalidInput("cannot write an empty dataset".into()))?;
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        state_dim: first.states.ncols(),
        action_dim: first.actions.ncols(),
        measurement_dim: first.measurements.ncols(),
        dt,
        seed,
        n_trajectories: episodes.len(),
        lengths: episodes.iter().map(Episode::len).collect(),
        n_transitions: total_transitions(episodes),
    };
    let json = serde_json::to_string_pretty(&header)?;
    std::fs::write(stem.with_extension("json"), json)?;
    let mut out = BufWriter::new(File::create(stem.with_extension("bin"))?);
    for ep in episodes {
        for m in [&ep.states, &ep.actions, &ep.measurements] {
            for v in m.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(header)
}

pub fn read_dataset(stem: &Path) -> Result<(DatasetHeader, Vec<Episode>)> {
    let header: DatasetHeader = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(SnsError::InvalidInput(format!(
            "unsupported dataset format version {}",
            header.format_version
        )));
    }
    let mut input = BufReader::new(File::open(stem.with_extension("bin"))?);
    let mut read_matrix = |rows: usize, cols: usize| -> Result<Array2<f64>> {
        let mut buf = vec![0u8; rows * cols * 8];
        input.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Array2::from_shape_vec((rows, cols), data).map_err(|e| SnsError::InvalidInput(e.to_string()))
    };
    let mut episodes = Vec::with_capacity(header.n_trajectories);
    for &len in &header.lengths {
        let states = read_matrix(len + 1, header.state_dim)?;
        let actions = read_matrix(len, header.action_dim)?;
        let measurements = read_matrix(len + 1, header.measurement_dim)?;
        episodes.push(Episode {
            states,
            actions,
            measurements,
            seed: header.seed,
        });
    }
    Ok((header, episodes))
}

/// Rows `q,v,u,q_next,v_next` for every transition, with a header line.
pub fn write_transitions_csv<W: Write>(episodes: &[Episode], mut out: W) -> Result<()> {
    writeln!(out, "trajectory,step,q,v,u,q_next,v_next")?;
    for (k, ep) in episodes.iter().enumerate() {
        for t in 0..ep.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                k,
                t,
                ep.states[[t, 0]],
                ep.states[[t, 1]],
                ep.actions[[t, 0]],
                ep.states[[t + 1, 0]],
                ep.states[[t + 1, 1]]
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_values() {
        assert_eq!(piecewise_fn(0.0), -0.2);
        assert!((piecewise_fn(2.2) - 0.048).abs() < 1e-12);
        let (m, b) = piecewise_tail();
        assert!((m - 0.34).abs() < 1e-12 && (b + 0.7).abs() < 1e-12);
        assert!((piecewise_fn(-4.0) - 0.4).abs() < 1e-12);
        assert!((piecewise_fn(5.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn piecewise_continuity_and_jumps() {
        let eps = 1e-13;
        let jump = |x: f64| piecewise_fn(x) - piecewise_fn(x - eps);
        assert!(jump(2.2).abs() < 1e-12);
        assert!(jump(1.3).abs() < 1e-12);
        // the only jump: -0.2 -> -0.6 at x = 1
        assert!((jump(1.0) + 0.4).abs() < 1e-12);
        // left limit -0.6·(-3) - 2 = -0.2 meets the plateau: continuous kink
        assert!(jump(-3.0).abs() < 1e-12);
    }

    #[test]
    fn relu_values() {
        assert_eq!(relu_target(-1.0), 0.0);
        assert_eq!(relu_target(0.0), 0.0);
        assert_eq!(relu_target(2.0), 2.0);
    }

    #[test]
    fn sdf_values() {
        assert!((shape_sdf(Shape::Circle, 0.0, 0.0) + 0.6).abs() < 1e-15);
        assert!(shape_sdf(Shape::Circle, 0.6, 0.0).abs() < 1e-15);
        assert!((shape_sdf(Shape::Square, 0.8, 0.0) - 0.2).abs() < 1e-12);
        // corner region uses the euclidean distance to the corner
        assert!((shape_sdf(Shape::Square, 0.9, 1.0) - 0.3f64.hypot(0.4)).abs() < 1e-12);
        assert!((shape_sdf(Shape::Square, 0.1, 0.2) + 0.4).abs() < 1e-12);
    }

    #[test]
    fn particle_step_examples() {
        let cfg = ParticleConfig::default();
        let s = particle_step(ParticleState { q: 1.0, v: 0.0 }, 0.0, &cfg);
        assert!((s.v + 0.1962).abs() < 1e-12);
        assert!((s.q - 0.996076).abs() < 1e-12);
        let s = particle_step(ParticleState { q: 0.001, v: -5.0 }, 0.0, &cfg);
        assert_eq!(s, ParticleState { q: 0.0, v: 0.0 });
        let s = particle_step(ParticleState { q: 0.0, v: 0.0 }, cfg.g, &cfg);
        assert_eq!(s, ParticleState { q: 0.0, v: 0.0 });
    }

    #[test]
    fn dataset_counts_and_invariants() {
        let cfg = ParticleConfig::default();
        let a = generate_particle_dataset(&cfg, 20, 7).unwrap();
        let b = generate_particle_dataset(&cfg, 20, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(total_transitions(&a), 20 * 300);
        assert!(a.iter().all(|e| e.states.column(0).iter().all(|q| *q >= 0.0)));
        assert!(generate_particle_dataset(&cfg, 0, 7).is_err());
    }

    #[test]
    fn fn_dataset_sampling() {
        let (x, y) = sample_fn_dataset(relu_target, 15000, (-2.0, 2.0), 3);
        assert_eq!(x.len(), 15000);
        assert!(x.iter().all(|v| (-2.0..=2.0).contains(v)));
        assert_eq!(y[0], relu_target(x[0]));
        let (x2, _) = sample_fn_dataset(relu_target, 15000, (-2.0, 2.0), 3);
        assert_eq!(x, x2);
        let (c, _) = sample_fn_dataset(relu_target, 10, (0.5, 0.5), 3);
        assert!(c.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn dataset_file_roundtrip() {
        let cfg = ParticleConfig::default();
        let eps = generate_particle_dataset(&cfg, 3, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("particle");
        let header = write_dataset(&stem, &eps, cfg.dt, 11).unwrap();
        assert_eq!(header.n_transitions, 900);
        let (h2, back) = read_dataset(&stem).unwrap();
        assert_eq!(header, h2);
        assert_eq!(eps, back);
    }
}
