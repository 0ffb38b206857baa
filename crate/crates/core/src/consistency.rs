//! Consistency-distillation baseline on flows with known trajectories, used
//! to measure how one-step endpoint prediction degrades when the teacher
//! trajectory bends sharply.

use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::model::{Bound, ParamStore};
use crate::objectives::{consistency_loss, EndpointModel, TeacherStep};
use crate::optim::{ema_update, AdamConfig, AdamW};
use crate::rng::{normal_mat, substream, StreamRng};
use crate::synthworld::bump;
use crate::tensor::Mat;
use rand::Rng;

/// Deterministic flow whose trajectory from noise `x1` is
/// `x(u) = (c + (1 − c)·u)·x1 + a·bump(u)·e₀`, ending at `x(0) = c·x1`.
/// With `a = 0` every trajectory is a straight chord.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BentFlow {
    pub coords: usize,
    /// Ratio `c` of data spread to noise spread.
    pub data_scale: f64,
    pub amplitude: f64,
    pub t_star: f64,
    pub width: f64,
}

fn bump_derivative(t: f64, center: f64, width: f64) -> f64 {
    let z = (t - center) / width;
    if z.abs() >= 1.0 {
        return 0.0;
    }
    let q = 1.0 - z * z;
    bump(t, center, width) * (-2.0 * z / (q * q)) / width
}

impl BentFlow {
    pub fn straight(coords: usize, data_scale: f64) -> Self {
        Self { coords, data_scale, amplitude: 0.0, t_star: 0.5, width: 0.1 }
    }

    /// The detour family used for the degradation comparison: unit amplitude,
    /// centred at `u = 0.9` with half-width 0.05.
    pub fn high_noise(coords: usize) -> Self {
        Self::high_bend(coords, 0.5, 0.9, 0.05, 1.0)
    }

    pub fn high_bend(coords: usize, data_scale: f64, t_star: f64, width: f64, amplitude: f64) -> Self {
        Self { coords, data_scale, amplitude, t_star, width }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords == 0 || !(self.data_scale > 0.0) || !self.amplitude.is_finite() || !(self.width > 0.0) {
            return Err(Error::Config(format!("invalid flow {self:?}")));
        }
        Ok(())
    }

    fn spread(&self, u: f64) -> f64 {
        self.data_scale + (1.0 - self.data_scale) * u
    }

    /// Trajectory states at times `u`, one row per noise row of `x1`.
    pub fn point(&self, x1: &Mat, u: &[f64]) -> Result<Mat> {
        self.check(x1, u)?;
        let mut out = x1.clone();
        for (r, &ur) in u.iter().enumerate() {
            let s = self.spread(ur);
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
            out.data[r * self.coords] += self.amplitude * bump(ur, self.t_star, self.width);
        }
        Ok(out)
    }

    pub fn endpoint(&self, x1: &Mat) -> Mat {
        x1.scale(self.data_scale)
    }

    /// Velocity `dx/du` at states `x` and times `u`.
    pub fn velocity(&self, x: &Mat, u: &[f64]) -> Result<Mat> {
        self.check(x, u)?;
        let mut v = x.clone();
        for (r, &ur) in u.iter().enumerate() {
            let row = v.row_mut(r);
            row[0] -= self.amplitude * bump(ur, self.t_star, self.width);
            let k = (1.0 - self.data_scale) / self.spread(ur);
            row.iter_mut().for_each(|c| *c *= k);
            row[0] += self.amplitude * bump_derivative(ur, self.t_star, self.width);
        }
        Ok(v)
    }

    fn check(&self, x: &Mat, u: &[f64]) -> Result<()> {
        if x.cols != self.coords || x.rows != u.len() {
            return Err(Error::Shape(format!("{:?} states for {} times in {} coordinates", x.shape(), u.len(), self.coords)));
        }
        Ok(())
    }
}

impl TeacherStep for BentFlow {
    /// One Euler step of the flow from `u` to `u − dt`.
    fn step(&self, x: &Mat, u: &[f64], dt: f64) -> Result<Mat> {
        let v = self.velocity(x, u)?;
        x.sub(&v.scale(dt))
    }
}

/// `f(x, u) = x + u·MLP([x, u])`, which satisfies `f(x, 0) = x` exactly.
#[derive(Clone, Debug)]
pub struct StudentMlp {
    coords: usize,
    params: ParamStore,
}

struct BoundStudent<'a> {
    net: &'a StudentMlp,
    params: &'a Bound,
}

impl StudentMlp {
    pub fn new(coords: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "init-student");
        let mut params = ParamStore::default();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        params.push("w1", Mat::randn(coords + 1, hidden, inv(coords + 1), &mut rng));
        params.push("b1", Mat::zeros(1, hidden));
        params.push("w2", Mat::randn(hidden, hidden, inv(hidden), &mut rng));
        params.push("b2", Mat::zeros(1, hidden));
        params.push("w3", Mat::randn(hidden, coords, inv(hidden) * 0.1, &mut rng));
        params.push("b3", Mat::zeros(1, coords));
        Self { coords, params }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, u: &[f64]) -> Result<Var> {
        let (rows, cols) = g.shape(x);
        if cols != self.coords || rows != u.len() {
            return Err(Error::Shape(format!("{:?} input for {} times", (rows, cols), u.len())));
        }
        let uc = g.constant(Mat::from_vec(rows, 1, u.to_vec())?);
        let h = g.cat_cols(x, uc)?;
        let h = g.affine(h, p.var(0), p.var(1))?;
        let h = g.gelu(h);
        let h = g.affine(h, p.var(2), p.var(3))?;
        let h = g.gelu(h);
        let h = g.affine(h, p.var(4), p.var(5))?;
        let h = g.scale_groups(h, u)?;
        g.add(x, h)
    }

    /// Endpoint predictions without gradient.
    pub fn predict(&self, x: &Mat, u: &[f64]) -> Result<Mat> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv, u)?;
        Ok(g.value(out).clone())
    }
}

impl EndpointModel for BoundStudent<'_> {
    fn endpoint(&self, g: &mut Graph, x_t: Var, u: &[f64]) -> Result<Var> {
        self.net.forward(g, self.params, x_t, u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyConfig {
    /// Teacher steps on `[0, 1]`; `Δt = 1/grid_steps`.
    pub grid_steps: usize,
    pub hidden: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    /// Re-noising time of the second step of two-step sampling; must lie on
    /// the grid. The default is the first grid time below the support of
    /// [`BentFlow::high_noise`].
    pub mid_time: f64,
    pub test_points: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            grid_steps: 16,
            hidden: 64,
            iterations: 3000,
            batch_size: 128,
            lr: 1e-3,
            ema_decay: 0.95,
            mid_time: 0.8125,
            test_points: 200,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_steps == 0 || self.hidden == 0 || self.batch_size == 0 || self.test_points == 0 {
            return Err(Error::Config("grid_steps, hidden, batch_size and test_points must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        let k = self.mid_time * self.grid_steps as f64;
        if !(self.mid_time > 0.0 && self.mid_time < 1.0) || (k - k.round()).abs() > 1e-9 {
            return Err(Error::Config(format!("mid_time {} is not an interior grid point", self.mid_time)));
        }
        Ok(())
    }
}

/// Trains a student by consistency distillation against Euler steps of `flow`.
/// Returns the student and its per-iteration losses.
pub fn distill(flow: &BentFlow, cfg: &ConsistencyConfig, seed: u64) -> Result<(StudentMlp, Vec<f64>)> {
    flow.validate()?;
    cfg.validate()?;
    let mut student = StudentMlp::new(flow.coords, cfg.hidden, seed);
    let mut ema = student.params.clone();
    let adam = AdamConfig { beta1: 0.9, weight_decay: 0.0, ..AdamConfig::with_lr(cfg.lr) };
    let mut opt = AdamW::new(adam, &student.params)?;
    let mut rng = substream(seed, "consistency");
    let dt = 1.0 / cfg.grid_steps as f64;
    let mut losses = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let x1 = normal_mat(cfg.batch_size, flow.coords, &mut rng);
        let u: Vec<f64> = (0..cfg.batch_size).map(|_| rng.random_range(1..=cfg.grid_steps) as f64 * dt).collect();
        let x_u = flow.point(&x1, &u)?;
        let mut g = Graph::new();
        let p = student.params.bind(&mut g, true);
        let pe = ema.bind(&mut g, false);
        let online = BoundStudent { net: &student, params: &p };
        let target = BoundStudent { net: &student, params: &pe };
        let loss = consistency_loss(&mut g, &online, &target, flow, &x_u, &u, dt)?;
        let value = g.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("consistency loss {value}")));
        }
        let grads = p.grads(&g.backward(loss)?, &student.params);
        opt.step(&mut student.params, &grads)?;
        ema_update(&mut ema, &student.params, cfg.ema_decay)?;
        losses.push(value);
    }
    Ok((student, losses))
}

fn row_norms(a: &Mat, b: &Mat) -> Result<Vec<f64>> {
    let d = a.sub(b)?;
    Ok((0..d.rows).map(|r| d.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect())
}

/// Per-point endpoint errors of one-step and two-step sampling from `x1`.
/// The second step re-noises the first estimate to `mid_time` along the
/// chord implied by the starting noise.
pub fn endpoint_errors(student: &StudentMlp, flow: &BentFlow, mid_time: f64, x1: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x1.rows;
    let truth = flow.endpoint(x1);
    let first = student.predict(x1, &vec![1.0; n])?;
    let mid = first.scale(1.0 - mid_time).add(&x1.scale(mid_time))?;
    let second = student.predict(&mid, &vec![mid_time; n])?;
    Ok((row_norms(&first, &truth)?, row_norms(&second, &truth)?))
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(contract("median of an empty set"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DegradationReport {
    pub one_step_median: f64,
    pub two_step_median: f64,
    /// `one_step_median / two_step_median`.
    pub ratio: f64,
    pub final_loss: f64,
}

/// Distills a student on `flow` and compares one- and two-step endpoint
/// errors on `cfg.test_points` fresh noise draws.
pub fn degradation(flow: &BentFlow, cfg: &ConsistencyConfig, seed: u64) -> Result<DegradationReport> {
    let (student, losses) = distill(flow, cfg, seed)?;
    let mut rng: StreamRng = substream(seed, "consistency-test");
    let x1 = normal_mat(cfg.test_points, flow.coords, &mut rng);
    let (one, two) = endpoint_errors(&student, flow, cfg.mid_time, &x1)?;
    let (m1, m2) = (median(&one)?, median(&two)?);
    Ok(DegradationReport { one_step_median: m1, two_step_median: m2, ratio: m1 / m2, final_loss: *losses.last().unwrap_or(&f64::NAN) })
}
