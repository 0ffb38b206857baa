//! Training losses: fake-score denoising, the normalized DMD surrogate, the
//! non-saturating adversarial pair, the consistency loss, and the forward-KL
//! regression surrogate.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::model::{Bound, CriticNet, GeneratorNet};
use crate::schedule::NoiseSchedule;
use crate::synthworld::GaussianWorld;
use crate::tensor::Mat;

/// Smallest admissible DMD normalizer.
pub const DMD_NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_g: f64,
    pub lambda_d: f64,
    pub lambda_fkl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_g: 0.03, lambda_d: 0.03, lambda_fkl: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_g", self.lambda_g), ("lambda_d", self.lambda_d), ("lambda_fkl", self.lambda_fkl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// A denoiser that predicts velocities for noised sequences `[B·F, d]` with
/// one timestep per sample.
pub trait ScoreModel {
    fn velocity(&self, g: &mut Graph, x_t: Var, t: &[u32], cond: &[usize]) -> Result<Var>;
}

impl<F> ScoreModel for F
where
    F: Fn(&mut Graph, Var, &[u32], &[usize]) -> Result<Var>,
{
    fn velocity(&self, g: &mut Graph, x_t: Var, t: &[u32], cond: &[usize]) -> Result<Var> {
        self(g, x_t, t, cond)
    }
}

/// The critic's velocity head on an already bound parameter set.
pub struct CriticScore<'a> {
    pub net: &'a CriticNet,
    pub params: &'a Bound,
}

impl ScoreModel for CriticScore<'_> {
    fn velocity(&self, g: &mut Graph, x_t: Var, t: &[u32], cond: &[usize]) -> Result<Var> {
        Ok(self.net.critic_forward(g, self.params, x_t, t, cond)?.velocity)
    }
}

/// The closed-form optimal velocity of a synthetic world; carries no gradient.
pub struct OracleScore<'a> {
    pub world: &'a GaussianWorld,
    pub schedule: NoiseSchedule,
}

impl ScoreModel for OracleScore<'_> {
    fn velocity(&self, g: &mut Graph, x_t: Var, t: &[u32], cond: &[usize]) -> Result<Var> {
        let (rows, cols) = g.shape(x_t);
        let batch = t.len();
        let flat = g.value(x_t).clone().reshaped(batch, rows * cols / batch.max(1))?;
        let v = self.world.velocity_batch(&flat, t, cond, &self.schedule)?;
        Ok(g.constant(v.reshaped(rows, cols)?))
    }
}

/// Mean squared error between a velocity prediction and `ε − x0`.
pub fn denoising_loss(g: &mut Graph, v_pred: Var, x0: &Mat, eps: &Mat) -> Result<Var> {
    let target = g.constant(crate::schedule::velocity_target(x0, eps)?);
    g.mse(v_pred, target)
}

/// Denoising loss of `score` on `x_theta` (no generator gradient) corrupted at `t`.
pub fn fake_score_loss(
    g: &mut Graph,
    score: &dyn ScoreModel,
    x_theta: &Mat,
    t: &[u32],
    eps: &Mat,
    cond: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let x_t = g.constant(schedule.corrupt_rows(x_theta, eps, t)?);
    let v = score.velocity(g, x_t, t, cond)?;
    denoising_loss(g, v, x_theta, eps)
}

/// `½·mean((x − sg(x − Δ))²)`, whose gradient with respect to `x` is `Δ / count`.
pub fn dmd_surrogate(g: &mut Graph, x_theta: Var, delta: &Mat) -> Result<Var> {
    let target = g.value(x_theta).sub(delta)?;
    let target = g.constant(target);
    let mse = g.mse(x_theta, target)?;
    Ok(g.scale(mse, 0.5))
}

#[derive(Clone, Debug)]
pub struct DmdOutput {
    pub loss: Var,
    /// Normalized clean-estimate difference `Δ`.
    pub delta: Mat,
    pub normalizer: f64,
}

/// DMD generator loss. Both scores see the same noised sample
/// `(1−σ)·x_theta + σ·ε`; their clean-estimate difference is divided by the
/// batch mean of `|x_theta − x̂0_real|`.
pub fn dmd_generator_loss(
    g: &mut Graph,
    x_theta: Var,
    fake: &dyn ScoreModel,
    real: &dyn ScoreModel,
    t: &[u32],
    eps: &Mat,
    cond: &[usize],
    schedule: &NoiseSchedule,
) -> Result<DmdOutput> {
    let x = g.value(x_theta).clone();
    let x_t = schedule.corrupt_rows(&x, eps, t)?;
    let xt_var = g.constant(x_t.clone());
    let v_fake = fake.velocity(g, xt_var, t, cond)?;
    let v_fake = g.value(v_fake).clone();
    let v_real = real.velocity(g, xt_var, t, cond)?;
    let v_real = g.value(v_real).clone();
    let x0_fake = schedule.x0_from_velocity_rows(&x_t, &v_fake, t)?;
    let x0_real = schedule.x0_from_velocity_rows(&x_t, &v_real, t)?;
    let mut n = x.zip_map(&x0_real, |a, b| (a - b).abs())?.mean();
    if !(n >= DMD_NORM_FLOOR) {
        log::warn!("DMD normalizer {n:e} clamped to {DMD_NORM_FLOOR:e}");
        n = DMD_NORM_FLOOR;
    }
    let delta = x0_fake.zip_map(&x0_real, |f, r| (f - r) / n)?;
    let loss = dmd_surrogate(g, x_theta, &delta)?;
    Ok(DmdOutput { loss, delta, normalizer: n })
}

/// `mean softplus(−l_fake)`.
pub fn adv_generator_loss(g: &mut Graph, logit_fake: Var) -> Var {
    let neg = g.scale(logit_fake, -1.0);
    let sp = g.softplus(neg);
    g.mean(sp)
}

/// `mean softplus(−l_real) + mean softplus(l_fake)`.
pub fn adv_discriminator_loss(g: &mut Graph, logit_real: Var, logit_fake: Var) -> Result<Var> {
    let neg = g.scale(logit_real, -1.0);
    let a = g.softplus(neg);
    let a = g.mean(a);
    let b = g.softplus(logit_fake);
    let b = g.mean(b);
    g.add(a, b)
}

/// Squared error between the generator's one-step clean estimate from the
/// stored ODE state `x_t0` at `t0` and the stored ODE endpoint. Earlier
/// blocks are conditioned on the endpoint itself.
#[allow(clippy::too_many_arguments)]
pub fn forward_kl_surrogate(
    g: &mut Graph,
    net: &GeneratorNet,
    params: &Bound,
    x_t0: &Mat,
    t0: &[u32],
    x_tar: &Mat,
    cond: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let clean = g.constant(x_tar.clone());
    let noisy = g.constant(x_t0.clone());
    let v = net.forward_teacher(g, params, clean, noisy, t0, cond)?;
    let sig = schedule.sigmas(t0)?;
    let sv = g.scale_groups(v, &sig)?;
    let x0 = g.sub(noisy, sv)?;
    g.mse(x0, clean)
}

/// A model that maps a noised state at normalized time `u ∈ [0, 1]` to a clean endpoint.
pub trait EndpointModel {
    fn endpoint(&self, g: &mut Graph, x_t: Var, u: &[f64]) -> Result<Var>;
}

/// One step `Φ_Δt` of a teacher's deterministic flow from `u` to `u − Δt`.
pub trait TeacherStep {
    fn step(&self, x: &Mat, u: &[f64], dt: f64) -> Result<Mat>;
}

/// `mean‖f_θ(x_u, u) − sg(f_ema(Φ_Δt(x_u), u − Δt))‖²`.
pub fn consistency_loss(
    g: &mut Graph,
    student: &dyn EndpointModel,
    ema: &dyn EndpointModel,
    teacher: &dyn TeacherStep,
    x_t: &Mat,
    u: &[f64],
    dt: f64,
) -> Result<Var> {
    if !(dt >= 0.0) {
        return Err(contract(format!("step size {dt} must be non-negative")));
    }
    if let Some(&bad) = u.iter().find(|&&ui| ui - dt < 0.0) {
        return Err(contract(format!("teacher step from {bad} by {dt} crosses t = 0")));
    }
    let prev = if dt == 0.0 { x_t.clone() } else { teacher.step(x_t, u, dt)? };
    let u_prev: Vec<f64> = u.iter().map(|&ui| ui - dt).collect();
    let target = {
        let xp = g.constant(prev);
        let e = ema.endpoint(g, xp, &u_prev)?;
        g.detach(e)
    };
    let x = g.constant(x_t.clone());
    let pred = student.endpoint(g, x, u)?;
    g.mse(pred, target)
}
