//! Trajectory curvature: the per-coordinate squared deviation of each local
//! secant velocity from the straight chord between the endpoints,
//!
//! ```text
//! C(t_i) = (1/D)·‖(x_{t_i} − x_{t_{i−1}})/(t_i − t_{i−1}) − (x_1 − x_0)‖²
//! ```
//!
//! plus aggregate statistics over many trajectories.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng::{substream, BOOTSTRAP};
use crate::synthworld::TrajectoryRecord;
use crate::tensor::Mat;

/// Lower edge of the high-noise band.
pub const DEFAULT_THRESHOLD: f64 = 0.9;
/// The mid-noise band `[0.3, 0.7)` used as the ratio denominator.
pub const MID_BAND: (f64, f64) = (0.3, 0.7);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureProfile {
    /// `t_1..t_n`.
    pub times: Vec<f64>,
    /// `C(t_i)`, one per interval.
    pub values: Vec<f64>,
    /// Interval widths `t_i − t_{i−1}`.
    pub widths: Vec<f64>,
    /// Values divided by their peak, once normalized.
    pub normalized: Option<Vec<f64>>,
    /// Set when normalization met an all-zero profile.
    pub all_zero: bool,
}

pub fn curvature_profile(traj: &TrajectoryRecord) -> Result<CurvatureProfile> {
    profile_of(&traj.grid, &traj.states)
}

fn profile_of(grid: &[f64], states: &Mat) -> Result<CurvatureProfile> {
    let n = grid.len();
    if n < 2 || states.rows != n {
        return Err(contract(format!("{} states on a {n}-point grid", states.rows)));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(contract("grid times must be strictly increasing (duplicate or unordered time)"));
    }
    let d = states.cols;
    if d == 0 {
        return Err(contract("trajectory has no coordinates"));
    }
    let x0 = states.row(0);
    let x1 = states.row(n - 1);
    let chord: Vec<f64> = x1.iter().zip(x0).map(|(a, b)| a - b).collect();
    let mut values = Vec::with_capacity(n - 1);
    let mut widths = Vec::with_capacity(n - 1);
    for i in 1..n {
        let dt = grid[i] - grid[i - 1];
        let (cur, prev) = (states.row(i), states.row(i - 1));
        let mut acc = 0.0;
        for c in 0..d {
            let dev = (cur[c] - prev[c]) / dt - chord[c];
            acc += dev * dev;
        }
        values.push(acc / d as f64);
        widths.push(dt);
    }
    Ok(CurvatureProfile { times: grid[1..].to_vec(), values, widths, normalized: None, all_zero: false })
}

/// Divides by the peak value; an all-zero profile is returned unchanged and flagged.
pub fn normalize_profile(profile: &CurvatureProfile) -> CurvatureProfile {
    let peak = profile.values.iter().cloned().fold(0.0, f64::max);
    let mut out = profile.clone();
    if peak > 0.0 {
        out.normalized = Some(profile.values.iter().map(|v| v / peak).collect());
        out.all_zero = false;
    } else {
        out.normalized = Some(profile.values.clone());
        out.all_zero = true;
    }
    out
}

/// Curvature of the frame-differenced states `y^k = x^k − x^{k−1}`.
pub fn temporal_difference_profile(traj: &TrajectoryRecord) -> Result<CurvatureProfile> {
    let (f, d) = traj
        .frame_shape
        .ok_or_else(|| contract("temporal differencing needs the trajectory's frame shape"))?;
    if f < 2 {
        return Err(contract(format!("temporal differencing needs at least 2 frames, got {f}")));
    }
    let mut diff = Mat::zeros(traj.states.rows, (f - 1) * d);
    for r in 0..traj.states.rows {
        let src = traj.states.row(r);
        let dst = diff.row_mut(r);
        for k in 1..f {
            for j in 0..d {
                dst[(k - 1) * d + j] = src[k * d + j] - src[(k - 1) * d + j];
            }
        }
    }
    profile_of(&traj.grid, &diff)
}

fn weight(p: &CurvatureProfile, i: usize, dt_weighted: bool) -> f64 {
    if dt_weighted {
        p.values[i] * p.widths[i]
    } else {
        p.values[i]
    }
}

/// Summed curvature over grid points whose time satisfies `keep`.
pub fn band_mass(p: &CurvatureProfile, keep: impl Fn(f64) -> bool, dt_weighted: bool) -> f64 {
    (0..p.values.len()).filter(|&i| keep(p.times[i])).map(|i| weight(p, i, dt_weighted)).sum()
}

pub fn total_mass(p: &CurvatureProfile, dt_weighted: bool) -> f64 {
    band_mass(p, |_| true, dt_weighted)
}

/// Fraction of curvature mass at `t ≥ threshold`; 0 for a flat profile.
pub fn high_noise_mass(p: &CurvatureProfile, threshold: f64, dt_weighted: bool) -> f64 {
    let total = total_mass(p, dt_weighted);
    if total <= 0.0 {
        return 0.0;
    }
    band_mass(p, |t| t >= threshold, dt_weighted) / total
}

/// Fraction of curvature mass within `radius` of `center`; 0 for a flat profile.
pub fn mass_near(p: &CurvatureProfile, center: f64, radius: f64) -> f64 {
    let total = total_mass(p, false);
    if total <= 0.0 {
        return 0.0;
    }
    band_mass(p, |t| (t - center).abs() <= radius + 1e-12, false) / total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureStats {
    pub high_noise_mass_mean: f64,
    pub high_noise_mass_sem: f64,
    pub ci95_lo: f64,
    pub ci95_hi: f64,
    /// Pooled mass at `t ≥ threshold` over pooled mid-band mass; `None` when
    /// the mid band carries no mass.
    pub high_mid_ratio: Option<f64>,
    pub n_trajectories: usize,
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatsOptions {
    pub threshold: f64,
    pub bootstrap_n: usize,
    pub seed: u64,
    pub dt_weighted: bool,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, bootstrap_n: 10_000, seed: 0, dt_weighted: false }
    }
}

/// Mean, standard error and percentile-bootstrap 95% interval of the
/// per-trajectory high-noise mass fractions. A single trajectory has SEM 0.
pub fn curvature_stats(profiles: &[CurvatureProfile], opts: &StatsOptions) -> Result<CurvatureStats> {
    if profiles.is_empty() {
        return Err(contract("curvature statistics need at least one trajectory"));
    }
    if opts.bootstrap_n == 0 {
        return Err(contract("bootstrap_n must be positive"));
    }
    let fr: Vec<f64> = profiles.iter().map(|p| high_noise_mass(p, opts.threshold, opts.dt_weighted)).collect();
    let n = fr.len();
    let mean = fr.iter().sum::<f64>() / n as f64;
    let sem = if n > 1 {
        let var = fr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    let mut rng = substream(opts.seed, BOOTSTRAP);
    let mut means: Vec<f64> = (0..opts.bootstrap_n)
        .map(|_| (0..n).map(|_| fr[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let lo = percentile(&means, 0.025).min(mean);
    let hi = percentile(&means, 0.975).max(mean);

    let high: f64 = profiles.iter().map(|p| band_mass(p, |t| t >= opts.threshold, opts.dt_weighted)).sum();
    let mid: f64 = profiles
        .iter()
        .map(|p| band_mass(p, |t| (MID_BAND.0..MID_BAND.1).contains(&t), opts.dt_weighted))
        .sum();
    Ok(CurvatureStats {
        high_noise_mass_mean: mean,
        high_noise_mass_sem: sem,
        ci95_lo: lo,
        ci95_hi: hi,
        high_mid_ratio: (mid > 0.0).then(|| high / mid),
        n_trajectories: n,
        threshold: opts.threshold,
    })
}

/// Linear-interpolated quantile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}
