//! Synthetic latent-sequence worlds with closed-form optimal denoisers.
//!
//! A world is a linear-Gaussian state-space model whose initial state is drawn
//! from a mixture of one or two Gaussian modes:
//!
//! ```text
//! x^1 ~ Σ_m w_m N(μ_m, s²I)
//! x^k = A x^{k−1} + b + w_k,   w_k ~ N(0, q²I)
//! ```
//!
//! Flattened over all frames, every mode is an exact `F·d`-dimensional
//! Gaussian with a mode-specific mean and a shared covariance, so the
//! posterior mean `E[x0 | x_t]` under `x_t = (1−σ)x0 + σε` is available in
//! closed form. That posterior mean plays the role of the frozen teacher.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::{normal_mat, StreamRng};
use crate::schedule::NoiseSchedule;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorldKind {
    GaussSsm,
    BimodalSsm,
}

impl WorldKind {
    pub fn name(self) -> &'static str {
        match self {
            WorldKind::GaussSsm => "gauss-ssm",
            WorldKind::BimodalSsm => "bimodal-ssm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gauss-ssm" => Ok(WorldKind::GaussSsm),
            "bimodal-ssm" => Ok(WorldKind::BimodalSsm),
            other => Err(Error::Config(format!("unknown world kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub dim: usize,
    pub frames: usize,
    pub mode_means: Vec<Vec<f64>>,
    pub mode_weights: Vec<f64>,
    /// Standard deviation of the initial state around its mode mean.
    pub init_scale: f64,
    /// Row-major `dim × dim` transition matrix.
    pub transition: Vec<f64>,
    pub drift: Vec<f64>,
    pub process_noise: f64,
    /// When set, each sequence carries its mode as the conditioning label.
    pub conditional: bool,
}

/// `scale · R(θ)` with 2×2 rotation blocks on consecutive coordinate pairs.
pub fn rotation_contraction(dim: usize, scale: f64, angle: f64) -> Vec<f64> {
    let mut a = vec![0.0; dim * dim];
    let (s, c) = angle.sin_cos();
    let mut i = 0;
    while i + 1 < dim {
        a[i * dim + i] = scale * c;
        a[i * dim + i + 1] = -scale * s;
        a[(i + 1) * dim + i] = scale * s;
        a[(i + 1) * dim + i + 1] = scale * c;
        i += 2;
    }
    if dim % 2 == 1 {
        a[(dim - 1) * dim + dim - 1] = scale;
    }
    a
}

impl WorldConfig {
    /// Unimodal world; every oracle is a single Gaussian.
    pub fn gauss_ssm(dim: usize, frames: usize) -> Self {
        Self {
            dim,
            frames,
            mode_means: vec![vec![0.5; dim]],
            mode_weights: vec![1.0],
            init_scale: 1.0,
            transition: rotation_contraction(dim, 0.95, 0.3),
            drift: vec![0.0; dim],
            process_noise: 0.3,
            conditional: false,
        }
    }

    /// Two well-separated initial modes that the dynamics carry through the sequence.
    pub fn bimodal_ssm(dim: usize, frames: usize) -> Self {
        let sep = 2.0;
        Self {
            dim,
            frames,
            mode_means: vec![vec![sep; dim], vec![-sep; dim]],
            mode_weights: vec![0.5, 0.5],
            init_scale: 0.3,
            transition: rotation_contraction(dim, 0.95, 0.3),
            drift: vec![0.0; dim],
            process_noise: 0.15,
            conditional: false,
        }
    }

    pub fn preset(kind: WorldKind, dim: usize, frames: usize) -> Self {
        match kind {
            WorldKind::GaussSsm => Self::gauss_ssm(dim, frames),
            WorldKind::BimodalSsm => Self::bimodal_ssm(dim, frames),
        }
    }

    /// A single deterministic sequence: zero initial spread and zero process noise.
    pub fn point_mass(dim: usize, frames: usize, mean: Vec<f64>) -> Self {
        Self {
            mode_means: vec![mean],
            mode_weights: vec![1.0],
            init_scale: 0.0,
            process_noise: 0.0,
            ..Self::gauss_ssm(dim, frames)
        }
    }

    pub fn flat_dim(&self) -> usize {
        self.dim * self.frames
    }

    pub fn num_modes(&self) -> usize {
        self.mode_means.len()
    }

    /// Number of distinct conditioning labels the world emits.
    pub fn num_conditions(&self) -> usize {
        if self.conditional {
            self.num_modes()
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.frames == 0 {
            return err("dim and frames must be positive".into());
        }
        if self.mode_means.is_empty() || self.mode_means.len() > 2 {
            return err(format!("1 or 2 modes supported, got {}", self.mode_means.len()));
        }
        if self.mode_means.iter().any(|m| m.len() != self.dim) {
            return err("every mode mean needs `dim` entries".into());
        }
        if self.mode_weights.len() != self.mode_means.len() {
            return err("one weight per mode required".into());
        }
        if self.mode_weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return err("mode weights must be non-negative".into());
        }
        let total: f64 = self.mode_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return err(format!("mode weights sum to {total}, expected 1"));
        }
        if !(self.init_scale >= 0.0) || !(self.process_noise >= 0.0) {
            return err("init_scale and process_noise must be non-negative".into());
        }
        if self.transition.len() != self.dim * self.dim || self.drift.len() != self.dim {
            return err("transition must be dim×dim and drift must have dim entries".into());
        }
        let all = self
            .mode_means
            .iter()
            .flatten()
            .chain(&self.transition)
            .chain(&self.drift);
        if all.into_iter().any(|x| !x.is_finite()) {
            return err("non-finite world parameter".into());
        }
        let rho = spectral_radius(&self.transition, self.dim);
        if rho >= 1.0 {
            return err(format!("transition spectral radius {rho:.4} is not below 1"));
        }
        Ok(())
    }
}

fn spectral_radius(a: &[f64], dim: usize) -> f64 {
    let m = DMatrix::from_row_slice(dim, dim, a);
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// One sequence of `frames` latent frames, stored as a `frames × dim` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub data: Mat,
    pub mode: usize,
}

impl LatentSequence {
    pub fn frames(&self) -> usize {
        self.data.rows
    }

    pub fn dim(&self) -> usize {
        self.data.cols
    }

    pub fn flattened(&self) -> &[f64] {
        &self.data.data
    }
}

/// A discretized noise-to-data path. `grid[0] = 0` is data, `grid[n] = 1` is noise.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub grid: Vec<f64>,
    /// `(n+1) × D`: one state per grid point.
    pub states: Mat,
    /// `(frames, dim)` when the coordinates come from a latent sequence.
    pub frame_shape: Option<(usize, usize)>,
    pub cond: usize,
}

impl TrajectoryRecord {
    pub fn new(grid: Vec<f64>, states: Mat, frame_shape: Option<(usize, usize)>) -> Result<Self> {
        validate_grid(&grid)?;
        if states.rows != grid.len() {
            return Err(contract(format!(
                "{} states for {} grid points",
                states.rows,
                grid.len()
            )));
        }
        if let Some((f, d)) = frame_shape {
            if f * d != states.cols {
                return Err(contract(format!("frame shape {f}x{d} vs {} coordinates", states.cols)));
            }
        }
        Ok(Self { grid, states, frame_shape, cond: 0 })
    }

    pub fn coords(&self) -> usize {
        self.states.cols
    }

    pub fn endpoint(&self) -> &[f64] {
        self.states.row(0)
    }

    pub fn noise(&self) -> &[f64] {
        self.states.row(self.states.rows - 1)
    }
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(contract("a trajectory grid needs at least two points"));
    }
    if grid[0] != 0.0 || *grid.last().unwrap() != 1.0 {
        return Err(contract("trajectory grid must start at 0 and end at 1"));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(contract("trajectory grid must be strictly increasing"));
    }
    Ok(())
}

pub fn uniform_grid(steps: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    g[steps] = 1.0;
    g
}

/// A validated world with its flattened Gaussian marginals precomputed.
#[derive(Clone, Debug)]
pub struct GaussianWorld {
    config: WorldConfig,
    /// Flattened mean per mode.
    means: Vec<DVector<f64>>,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
    /// Classifier-free-guidance style interpolation between conditional and
    /// unconditional oracles; 1 disables it.
    guidance: f64,
}

impl GaussianWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.dim, config.frames);
        let n = d * f;
        let a = DMatrix::from_row_slice(d, d, &config.transition);
        let b = DVector::from_column_slice(&config.drift);

        let means = config
            .mode_means
            .iter()
            .map(|mu| {
                let mut flat = DVector::zeros(n);
                let mut m = DVector::from_column_slice(mu);
                for k in 0..f {
                    flat.rows_mut(k * d, d).copy_from(&m);
                    m = &a * &m + &b;
                }
                flat
            })
            .collect();

        // Cov(x^k, x^j) = A^{k−j} P_j for k ≥ j, with P_1 = s²I and
        // P_k = A P_{k−1} Aᵀ + q²I.
        let mut cov = DMatrix::zeros(n, n);
        let mut p = DMatrix::identity(d, d) * config.init_scale.powi(2);
        let q2 = DMatrix::identity(d, d) * config.process_noise.powi(2);
        let mut diag_blocks = Vec::with_capacity(f);
        for _ in 0..f {
            diag_blocks.push(p.clone());
            p = &a * &p * a.transpose() + &q2;
        }
        for j in 0..f {
            let mut block = diag_blocks[j].clone();
            for k in j..f {
                cov.view_mut((k * d, j * d), (d, d)).copy_from(&block);
                if k != j {
                    cov.view_mut((j * d, k * d), (d, d)).copy_from(&block.transpose());
                }
                block = &a * &block;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let eigvals = eig.eigenvalues.map(|l| l.max(0.0));
        Ok(Self { config, means, eigvecs: eig.eigenvectors, eigvals, guidance: 1.0 })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn with_guidance(mut self, guidance: f64) -> Self {
        self.guidance = guidance;
        self
    }

    pub fn guidance(&self) -> f64 {
        self.guidance
    }

    pub fn flat_dim(&self) -> usize {
        self.config.flat_dim()
    }

    pub fn flat_mean(&self, mode: usize) -> Vec<f64> {
        self.means[mode].iter().copied().collect()
    }

    /// Dense flattened covariance, rebuilt from its eigendecomposition.
    pub fn flat_covariance(&self) -> DMatrix<f64> {
        &self.eigvecs * DMatrix::from_diagonal(&self.eigvals) * self.eigvecs.transpose()
    }

    pub fn sample_sequence(&self, rng: &mut StreamRng) -> LatentSequence {
        let cfg = &self.config;
        let (d, f) = (cfg.dim, cfg.frames);
        let mode = pick_mode(&cfg.mode_weights, rng);
        let mut data = Mat::zeros(f, d);
        let mut x: Vec<f64> = cfg.mode_means[mode]
            .iter()
            .map(|&m| m + cfg.init_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for k in 0..f {
            data.row_mut(k).copy_from_slice(&x);
            let mut next = vec![0.0; d];
            for (i, nx) in next.iter_mut().enumerate() {
                let ax: f64 = (0..d).map(|j| cfg.transition[i * d + j] * x[j]).sum();
                *nx = ax + cfg.drift[i] + cfg.process_noise * rng.sample::<f64, _>(StandardNormal);
            }
            x = next;
        }
        LatentSequence { data, mode }
    }

    /// `n` sequences as rows of an `n × (F·d)` matrix, plus their conditioning labels.
    pub fn sample_batch(&self, n: usize, rng: &mut StreamRng) -> (Mat, Vec<usize>) {
        let mut out = Mat::zeros(n, self.flat_dim());
        let mut cond = Vec::with_capacity(n);
        for r in 0..n {
            let s = self.sample_sequence(rng);
            out.row_mut(r).copy_from_slice(s.flattened());
            cond.push(self.cond_of(s.mode));
        }
        (out, cond)
    }

    pub fn cond_of(&self, mode: usize) -> usize {
        if self.config.conditional {
            mode
        } else {
            0
        }
    }

    /// Conditioning labels for `n` fresh prompts.
    pub fn sample_conds(&self, n: usize, rng: &mut StreamRng) -> Vec<usize> {
        (0..n).map(|_| self.cond_of(pick_mode(&self.config.mode_weights, rng))).collect()
    }

    /// Per-mode posterior means and log-responsibility terms at noise level `sigma`.
    fn mode_posteriors(&self, x: &DVector<f64>, sigma: f64, modes: &[usize]) -> (Vec<DVector<f64>>, Vec<f64>) {
        let a = 1.0 - sigma;
        let s2 = sigma * sigma;
        let mut posts = Vec::with_capacity(modes.len());
        let mut logits = Vec::with_capacity(modes.len());
        for &m in modes {
            let centered = x - &self.means[m] * a;
            let y = self.eigvecs.tr_mul(&centered);
            let mut z = DVector::zeros(y.len());
            let mut quad = 0.0;
            for i in 0..y.len() {
                let lam = self.eigvals[i];
                let var = a * a * lam + s2;
                z[i] = a * lam / var * y[i];
                quad += y[i] * y[i] / var;
            }
            posts.push(&self.means[m] + &self.eigvecs * z);
            logits.push(self.config.mode_weights[m].ln() - 0.5 * quad);
        }
        (posts, logits)
    }

    fn mixture_mean(&self, x: &DVector<f64>, sigma: f64, modes: &[usize]) -> DVector<f64> {
        let (posts, logits) = self.mode_posteriors(x, sigma, modes);
        if posts.len() == 1 {
            return posts.into_iter().next().unwrap();
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut out = DVector::zeros(x.len());
        for (p, wi) in posts.iter().zip(&w) {
            out += p * (wi / z);
        }
        out
    }

    /// Exact `E[x0 | x_t]` at noise level `sigma` for conditioning label `cond`.
    /// At `sigma = 0` the input itself is returned.
    pub fn posterior_mean_sigma(&self, x_t: &[f64], sigma: f64, cond: usize) -> Result<Vec<f64>> {
        if x_t.len() != self.flat_dim() {
            return Err(Error::Shape(format!("{} coordinates, world has {}", x_t.len(), self.flat_dim())));
        }
        if x_t.iter().any(|v| !v.is_finite()) {
            return Err(contract("non-finite oracle input"));
        }
        if sigma <= 0.0 {
            return Ok(x_t.to_vec());
        }
        let x = DVector::from_column_slice(x_t);
        let all: Vec<usize> = (0..self.config.num_modes()).collect();
        let mean = if self.config.conditional {
            if cond >= self.config.num_modes() {
                return Err(contract(format!("condition {cond} out of range")));
            }
            let c = self.mixture_mean(&x, sigma, &[cond]);
            if self.guidance == 1.0 {
                c
            } else {
                let u = self.mixture_mean(&x, sigma, &all);
                &u + (&c - &u) * self.guidance
            }
        } else {
            self.mixture_mean(&x, sigma, &all)
        };
        Ok(mean.iter().copied().collect())
    }

    /// Optimal velocity `(x_t − E[x0|x_t]) / σ`; zero at `σ = 0`.
    pub fn velocity_sigma(&self, x_t: &[f64], sigma: f64, cond: usize) -> Result<Vec<f64>> {
        if sigma <= 0.0 {
            if x_t.iter().any(|v| !v.is_finite()) {
                return Err(contract("non-finite oracle input"));
            }
            return Ok(vec![0.0; x_t.len()]);
        }
        let mean = self.posterior_mean_sigma(x_t, sigma, cond)?;
        Ok(x_t.iter().zip(&mean).map(|(x, m)| (x - m) / sigma).collect())
    }

    pub fn analytic_velocity(&self, x_t: &[f64], t: u32, cond: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.velocity_sigma(x_t, schedule.sigma_at(t)?, cond)
    }

    /// Row-wise oracle velocity for a batch `[B, F·d]` with per-sample timesteps.
    pub fn velocity_batch(&self, x_t: &Mat, ts: &[u32], cond: &[usize], schedule: &NoiseSchedule) -> Result<Mat> {
        if ts.len() != x_t.rows || cond.len() != x_t.rows {
            return Err(Error::Shape("one timestep and condition per row required".into()));
        }
        let mut out = Mat::zeros(x_t.rows, x_t.cols);
        for r in 0..x_t.rows {
            let v = self.analytic_velocity(x_t.row(r), ts[r], cond[r], schedule)?;
            out.row_mut(r).copy_from_slice(&v);
        }
        Ok(out)
    }

    /// Probability-flow trajectory from fresh noise, integrated with explicit
    /// Euler in σ over `grid` (normalized timesteps mapped through `schedule`).
    pub fn make_ode_trajectory(&self, schedule: &NoiseSchedule, grid: &[f64], rng: &mut StreamRng) -> Result<TrajectoryRecord> {
        validate_grid(grid)?;
        let cond = self.sample_conds(1, rng)[0];
        let noise = normal_mat(1, self.flat_dim(), rng);
        let mut rec = self.integrate_flow(schedule, grid, noise.row(0), cond)?;
        rec.cond = cond;
        Ok(rec)
    }

    /// Deterministic flow from a given noise vector.
    pub fn integrate_flow(&self, schedule: &NoiseSchedule, grid: &[f64], noise: &[f64], cond: usize) -> Result<TrajectoryRecord> {
        validate_grid(grid)?;
        let n = grid.len() - 1;
        let mut states = Mat::zeros(n + 1, self.flat_dim());
        let mut x = noise.to_vec();
        states.row_mut(n).copy_from_slice(&x);
        for i in (1..=n).rev() {
            let s_hi = schedule.sigma_frac(grid[i]);
            let s_lo = schedule.sigma_frac(grid[i - 1]);
            let v = self.velocity_sigma(&x, s_hi, cond)?;
            for (xi, vi) in x.iter_mut().zip(&v) {
                *xi += (s_lo - s_hi) * vi;
            }
            states.row_mut(i - 1).copy_from_slice(&x);
        }
        let mut rec = TrajectoryRecord::new(grid.to_vec(), states, Some((self.config.frames, self.config.dim)))?;
        rec.cond = cond;
        Ok(rec)
    }
}

fn pick_mode<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    if weights.len() == 1 {
        return 0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Smooth bump supported on `[center − width, center + width]`, peak 1.
pub fn bump(t: f64, center: f64, width: f64) -> f64 {
    let z = (t - center) / width;
    if z.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - z * z)).exp()
    }
}

/// Trajectories that follow the straight chord from data to noise except for
/// a smooth detour localized around `t_star`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HighBendFamily {
    pub coords: usize,
    pub t_star: f64,
    pub width: f64,
    pub amplitude: f64,
}

impl HighBendFamily {
    pub fn sample(&self, grid: &[f64], rng: &mut StreamRng) -> Result<TrajectoryRecord> {
        validate_grid(grid)?;
        let x0 = normal_mat(1, self.coords, rng);
        let x1 = normal_mat(1, self.coords, rng);
        let dir = normal_mat(1, self.coords, rng);
        let mut states = Mat::zeros(grid.len(), self.coords);
        for (i, &t) in grid.iter().enumerate() {
            let phi = self.amplitude * bump(t, self.t_star, self.width);
            for c in 0..self.coords {
                let v = (1.0 - t) * x0.data[c] + t * x1.data[c] + phi * dir.data[c];
                states.set(i, c, v);
            }
        }
        TrajectoryRecord::new(grid.to_vec(), states, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn scalar_world(mean: f64, var: f64) -> GaussianWorld {
        let cfg = WorldConfig {
            dim: 1,
            frames: 1,
            mode_means: vec![vec![mean]],
            mode_weights: vec![1.0],
            init_scale: var.sqrt(),
            transition: vec![0.5],
            drift: vec![0.0],
            process_noise: 0.0,
            conditional: false,
        };
        GaussianWorld::new(cfg).unwrap()
    }

    #[test]
    fn velocity_hand_cases() {
        let w = scalar_world(0.0, 1.0);
        // posterior coefficient is exactly one at σ = 0.5
        let v = w.velocity_sigma(&[1.7], 0.5, 0).unwrap();
        assert!(v[0].abs() < 1e-12);
        let v = w.velocity_sigma(&[1.0], 0.8, 0).unwrap();
        assert!((v[0] - 0.882_353).abs() < 1e-6, "{}", v[0]);
        let p = w.posterior_mean_sigma(&[1.0], 0.8, 0).unwrap();
        assert!((p[0] - 0.294_118).abs() < 1e-6);
    }

    #[test]
    fn point_mass_velocity_at_full_noise() {
        let c0 = vec![0.3, -1.2];
        let w = GaussianWorld::new(WorldConfig::point_mass(2, 1, c0.clone())).unwrap();
        let eps = [0.9, 0.4];
        let v = w.velocity_sigma(&eps, 1.0, 0).unwrap();
        assert!((v[0] - (eps[0] - c0[0])).abs() < 1e-12);
        assert!((v[1] - (eps[1] - c0[1])).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_convention_returns_zero_velocity() {
        let w = GaussianWorld::new(WorldConfig::gauss_ssm(2, 3)).unwrap();
        let x = vec![0.1; 6];
        assert_eq!(w.velocity_sigma(&x, 0.0, 0).unwrap(), vec![0.0; 6]);
        assert!(w.velocity_sigma(&[f64::NAN; 6], 0.5, 0).is_err());
    }

    #[test]
    fn noiseless_world_is_deterministic_recursion() {
        let mu = vec![1.0, -0.5, 0.25, 2.0];
        let cfg = WorldConfig::point_mass(4, 5, mu.clone());
        let w = GaussianWorld::new(cfg.clone()).unwrap();
        let s = w.sample_sequence(&mut substream(3, "world"));
        let mut x = mu;
        for k in 0..5 {
            for j in 0..4 {
                assert!((s.data.get(k, j) - x[j]).abs() < 1e-12);
            }
            x = (0..4).map(|i| (0..4).map(|j| cfg.transition[i * 4 + j] * x[j]).sum()).collect();
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let w = GaussianWorld::new(WorldConfig::bimodal_ssm(4, 8)).unwrap();
        let a = w.sample_batch(5, &mut substream(9, "world"));
        let b = w.sample_batch(5, &mut substream(9, "world"));
        assert_eq!(a, b);
    }

    #[test]
    fn non_stationary_transition_rejected() {
        let mut cfg = WorldConfig::gauss_ssm(2, 3);
        cfg.transition = rotation_contraction(2, 1.01, 0.2);
        assert!(matches!(GaussianWorld::new(cfg), Err(Error::Config(_))));
        let mut cfg = WorldConfig::bimodal_ssm(2, 3);
        cfg.mode_weights = vec![0.7, 0.7];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn first_frame_mean_monte_carlo() {
        let w = GaussianWorld::new(WorldConfig::gauss_ssm(4, 8)).unwrap();
        let mut rng = substream(21, "world");
        let n = 100_000;
        let mut sum = [0.0; 4];
        for _ in 0..n {
            let s = w.sample_sequence(&mut rng);
            for j in 0..4 {
                sum[j] += s.data.get(0, j);
            }
        }
        let tol = 3.0 * 1.0 / (n as f64).sqrt();
        for j in 0..4 {
            assert!((sum[j] / n as f64 - 0.5).abs() < tol);
        }
    }

    #[test]
    fn flattened_covariance_matches_samples() {
        let w = GaussianWorld::new(WorldConfig::gauss_ssm(2, 3)).unwrap();
        let cov = w.flat_covariance();
        let mean = w.flat_mean(0);
        let mut rng = substream(5, "world");
        let n = 60_000;
        let mut acc = DMatrix::<f64>::zeros(6, 6);
        for _ in 0..n {
            let s = w.sample_sequence(&mut rng);
            let v = DVector::from_iterator(6, s.flattened().iter().zip(&mean).map(|(x, m)| x - m));
            acc += &v * v.transpose();
        }
        acc /= n as f64;
        assert!((acc - cov).abs().max() < 0.04);
    }

    #[test]
    fn point_mass_flow_recovers_center() {
        let c0 = vec![0.7, -0.3, 1.1, 0.0];
        let w = GaussianWorld::new(WorldConfig::point_mass(4, 2, c0)).unwrap();
        let s = NoiseSchedule::default();
        let rec = w.make_ode_trajectory(&s, &uniform_grid(49), &mut substream(1, "t")).unwrap();
        let target = w.flat_mean(0);
        for (a, b) in rec.endpoint().iter().zip(&target) {
            assert!((a - b).abs() < 1e-3);
        }
        // a single Euler step from pure noise lands on the center as well
        let rec = w.make_ode_trajectory(&s, &[0.0, 1.0], &mut substream(2, "t")).unwrap();
        let v = w.velocity_sigma(rec.noise(), 1.0, 0).unwrap();
        for i in 0..8 {
            assert!((rec.endpoint()[i] - (rec.noise()[i] - v[i])).abs() < 1e-12);
            assert!((rec.endpoint()[i] - target[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_grid_rejected() {
        let w = GaussianWorld::new(WorldConfig::gauss_ssm(2, 2)).unwrap();
        let s = NoiseSchedule::default();
        let mut rng = substream(1, "t");
        assert!(w.make_ode_trajectory(&s, &[0.0, 0.5, 0.5, 1.0], &mut rng).is_err());
        assert!(w.make_ode_trajectory(&s, &[0.1, 1.0], &mut rng).is_err());
    }

    #[test]
    fn bimodal_oracle_is_mixture_of_posteriors() {
        let w = GaussianWorld::new(WorldConfig::bimodal_ssm(1, 1)).unwrap();
        // symmetric input at full noise: responsibilities equal, mean is the mixture mean
        let p = w.posterior_mean_sigma(&[0.0], 1.0, 0).unwrap();
        assert!(p[0].abs() < 1e-12);
        // near a mode at low noise the posterior snaps to that mode
        let p = w.posterior_mean_sigma(&[1.9], 0.05, 0).unwrap();
        assert!((p[0] - 2.0).abs() < 0.2);
    }
}
