//! Interleaved two-time-scale training: one critic update every iteration and
//! one generator update every `K` iterations, preceded by a short regression
//! pre-fit of the generator to probability-flow endpoints.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::model::{grad_norm, Bound, Checkpoint, CriticNet, GeneratorNet, KvCache, ModelConfig, ParamStore};
use crate::objectives::{
    adv_discriminator_loss, adv_generator_loss, denoising_loss, dmd_generator_loss, forward_kl_surrogate, CriticScore,
    LossWeights, OracleScore,
};
use crate::optim::{ema_update, AdamConfig, AdamW};
use crate::rng::{indexed_substream, normal_mat, StreamRng, CRITIC_NOISE, ROLLOUT, WORLD};
use crate::sampler::{rollout_steps, Renoise, SampleConfig};
use crate::schedule::NoiseSchedule;
use crate::synthworld::{uniform_grid, GaussianWorld};
use crate::tensor::Mat;

/// What the discriminator treats as "real".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscTarget {
    /// Fresh samples from the world.
    RealData,
    /// Two-step rollouts of a frozen copy of the current generator.
    SelfDistilled,
}

impl DiscTarget {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "real-data" => Ok(DiscTarget::RealData),
            "self-distilled" => Ok(DiscTarget::SelfDistilled),
            other => Err(Error::Config(format!("unknown discriminator target `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DiscTarget::RealData => "real-data",
            DiscTarget::SelfDistilled => "self-distilled",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Generator interval `K`.
    pub generator_interval: usize,
    pub weights: LossWeights,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub ema_start: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub num_timesteps: u32,
    pub shift: f64,
    /// Inclusive range of critic and DMD timesteps.
    pub t_min: u32,
    pub t_max: u32,
    pub disc_target: DiscTarget,
    /// Timesteps of the self-distilled target rollout.
    pub target_timesteps: Vec<u32>,
    pub prefit_steps: usize,
    pub prefit_lr: f64,
    pub prefit_timesteps: Vec<u32>,
    /// Denoising-only critic updates on pre-fit generator samples before the first iteration.
    pub critic_warmup_steps: usize,
    /// Euler steps used to integrate the teacher flow for regression pairs.
    pub ode_steps: usize,
    /// Save checkpoints every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub record_wall_ms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            generator_interval: 5,
            weights: LossWeights::default(),
            lr_generator: 1e-3,
            lr_critic: 1e-3,
            beta1: 0.0,
            beta2: 0.999,
            weight_decay: 0.01,
            ema_decay: 0.99,
            ema_start: 50,
            iterations: 300,
            batch_size: 16,
            num_timesteps: 1000,
            shift: 5.0,
            t_min: 20,
            t_max: 980,
            disc_target: DiscTarget::RealData,
            target_timesteps: vec![1000, 750],
            prefit_steps: 200,
            prefit_lr: 1e-3,
            prefit_timesteps: vec![1000, 750, 500, 250],
            critic_warmup_steps: 0,
            ode_steps: 40,
            checkpoint_every: 0,
            record_wall_ms: false,
        }
    }
}

impl TrainConfig {
    /// Values used for billion-parameter backbones; too slow for toy nets.
    pub fn paper_scale() -> Self {
        Self { lr_generator: 1e-5, lr_critic: 1e-5, prefit_lr: 1e-5, ..Self::default() }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.num_timesteps, self.shift)
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.generator_interval == 0 {
            return err("generator_interval must be at least 1".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return err(format!("ema_decay {} outside [0, 1)", self.ema_decay));
        }
        self.weights.validate()?;
        self.adam(self.lr_generator).validate()?;
        self.adam(self.lr_critic).validate()?;
        if self.prefit_steps > 0 {
            self.adam(self.prefit_lr).validate()?;
        }
        let sched = self.schedule()?;
        if !(0 < self.t_min && self.t_min <= self.t_max && self.t_max < self.num_timesteps) {
            return err(format!(
                "critic timestep range [{}, {}] must lie strictly inside (0, {})",
                self.t_min, self.t_max, self.num_timesteps
            ));
        }
        crate::sampler::validate_steps(&self.target_timesteps, &sched)?;
        if self.ode_steps == 0 {
            return err("ode_steps must be positive".into());
        }
        for &t in &self.prefit_timesteps {
            if t == 0 || t > self.num_timesteps || (t as usize * self.ode_steps) % self.num_timesteps as usize != 0 {
                return err(format!("prefit timestep {t} is not on the {}-step ODE grid", self.ode_steps));
            }
        }
        if self.prefit_steps > 0 && self.prefit_timesteps.is_empty() {
            return err("prefit needs at least one timestep".into());
        }
        Ok(())
    }
}

/// One iteration's record. Generator fields are `None` on critic-only iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRow {
    pub iter: usize,
    pub l_fake: f64,
    pub l_d_adv: f64,
    pub l_dmd: Option<f64>,
    pub l_g_adv: Option<f64>,
    pub l_real: f64,
    pub l_fake_logit: f64,
    pub gap: f64,
    pub gnorm_g: Option<f64>,
    pub gnorm_c: f64,
    pub wall_ms: Option<f64>,
}

impl TrainRow {
    pub fn generator_updated(&self) -> bool {
        self.l_dmd.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
}

pub const TRAINLOG_HEADER: &str = "iter,L_fake,L_D_adv,L_DMD,L_G_adv,l_real,l_fake,gap,gnorm_G,gnorm_C,wall_ms";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAINLOG_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.iter,
                r.l_fake,
                r.l_d_adv,
                opt(r.l_dmd),
                opt(r.l_g_adv),
                r.l_real,
                r.l_fake_logit,
                r.gap,
                opt(r.gnorm_g),
                r.gnorm_c,
                opt(r.wall_ms)
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(TRAINLOG_HEADER) {
            return Err(Error::Parse("unexpected training log header".into()));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Parse(format!("`{s}` is not a number"))) };
        let opt_num = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 11 {
                return Err(Error::Parse(format!("training log row has {} fields: `{line}`", f.len())));
            }
            rows.push(TrainRow {
                iter: f[0].parse().map_err(|_| Error::Parse(format!("bad iteration `{}`", f[0])))?,
                l_fake: num(f[1])?,
                l_d_adv: num(f[2])?,
                l_dmd: opt_num(f[3])?,
                l_g_adv: opt_num(f[4])?,
                l_real: num(f[5])?,
                l_fake_logit: num(f[6])?,
                gap: num(f[7])?,
                gnorm_g: opt_num(f[8])?,
                gnorm_c: num(f[9])?,
                wall_ms: opt_num(f[10])?,
            });
        }
        Ok(Self { rows })
    }

    pub fn generator_iterations(&self) -> Vec<usize> {
        self.rows.iter().filter(|r| r.generator_updated()).map(|r| r.iter).collect()
    }
}

/// Independent random streams for the two update paths.
#[derive(Clone, Debug)]
struct Streams {
    world: StreamRng,
    rollout: StreamRng,
    noise: StreamRng,
}

impl Streams {
    fn new(seed: u64, role: u64) -> Self {
        Self {
            world: indexed_substream(seed, WORLD, role),
            rollout: indexed_substream(seed, ROLLOUT, role),
            noise: indexed_substream(seed, CRITIC_NOISE, role),
        }
    }
}

const CRITIC_ROLE: u64 = 1;
const GENERATOR_ROLE: u64 = 2;
const TARGET_ROLE: u64 = 3;
const ODE_ROLE: u64 = 4;

/// Differentiable corruption `(1−σ_b)·x + σ_b·ε` with per-sample noise levels.
fn corrupt_var(g: &mut Graph, x: Var, eps: &Mat, t: &[u32], schedule: &NoiseSchedule) -> Result<Var> {
    let sig = schedule.sigmas(t)?;
    let keep: Vec<f64> = sig.iter().map(|s| 1.0 - s).collect();
    let a = g.scale_groups(x, &keep)?;
    let e = g.constant(eps.clone());
    let e = g.scale_groups(e, &sig)?;
    g.add(a, e)
}

fn check_finite(iter: usize, name: &str, value: f64, batch: &Mat, dump_dir: Option<&PathBuf>) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    let mut msg = format!("iteration {iter}: {name} = {value}");
    if let Some(dir) = dump_dir {
        let path = dir.join(format!("nonfinite_iter{iter}.csv"));
        let frames = batch.rows;
        let flat = batch.clone().reshaped(1, batch.len())?;
        if crate::io::sequences_to_csv(&flat, frames)
            .map(|csv| crate::io::write_atomic(&path, csv.as_bytes()))
            .is_ok()
        {
            let _ = write!(msg, "; offending batch written to {}", path.display());
        }
    } else {
        let head: Vec<String> = batch.data.iter().take(8).map(|v| format!("{v:.4}")).collect();
        let _ = write!(msg, "; batch starts [{}]", head.join(", "));
    }
    log::error!("{msg}");
    Err(Error::NonFinite(msg))
}

/// Samples one integer timestep per sample, uniform over `[lo, hi]`.
fn sample_timesteps(n: usize, lo: u32, hi: u32, rng: &mut StreamRng) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

/// Generator, EMA copy, critic, optimizers and RNG streams of one run.
pub struct Trainer<'w> {
    cfg: TrainConfig,
    world: &'w GaussianWorld,
    schedule: NoiseSchedule,
    pub generator: GeneratorNet,
    pub generator_ema: ParamStore,
    pub critic: CriticNet,
    opt_g: AdamW,
    opt_c: AdamW,
    critic_streams: Streams,
    gen_streams: Streams,
    target_streams: Streams,
    ode_rng: StreamRng,
    pub log: TrainLog,
    dump_dir: Option<PathBuf>,
    started: Option<Instant>,
}

impl<'w> Trainer<'w> {
    pub fn new(cfg: TrainConfig, model: ModelConfig, world: &'w GaussianWorld, seed: u64) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        let wc = world.config();
        if model.frame_dim != wc.dim || model.frames != wc.frames || model.num_conditions != wc.num_conditions() {
            return Err(Error::Config(format!(
                "model expects {}x{} frames with {} conditions; world has {}x{} with {}",
                model.frames,
                model.frame_dim,
                model.num_conditions,
                wc.frames,
                wc.dim,
                wc.num_conditions()
            )));
        }
        if model.num_timesteps != cfg.num_timesteps {
            return Err(Error::Config("model and training disagree on num_timesteps".into()));
        }
        let schedule = cfg.schedule()?;
        let generator = GeneratorNet::new(model.clone(), seed)?;
        let critic = CriticNet::new(model, seed)?;
        let opt_g = AdamW::new(cfg.adam(cfg.lr_generator), generator.params())?;
        let opt_c = AdamW::new(cfg.adam(cfg.lr_critic), critic.params())?;
        Ok(Self {
            generator_ema: generator.params().clone(),
            generator,
            critic,
            opt_g,
            opt_c,
            critic_streams: Streams::new(seed, CRITIC_ROLE),
            gen_streams: Streams::new(seed, GENERATOR_ROLE),
            target_streams: Streams::new(seed, TARGET_ROLE),
            ode_rng: indexed_substream(seed, WORLD, ODE_ROLE),
            log: TrainLog::default(),
            dump_dir: None,
            started: None,
            cfg,
            world,
            schedule,
        })
    }

    pub fn with_dump_dir(mut self, dir: PathBuf) -> Self {
        self.dump_dir = Some(dir);
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn shape(&self) -> (usize, usize, usize) {
        let m = self.generator.config();
        (self.cfg.batch_size, m.frames, m.frame_dim)
    }

    /// Regression pairs `(x_t, t, endpoint, cond)` from the teacher flow; the
    /// timestep of each pair is drawn from `timesteps`.
    pub fn ode_pairs(&mut self, n: usize, timesteps: &[u32]) -> Result<(Mat, Vec<u32>, Mat, Vec<usize>)> {
        let (_, f, d) = self.shape();
        let grid = uniform_grid(self.cfg.ode_steps);
        let t_total = self.cfg.num_timesteps as usize;
        let mut x_t = Mat::zeros(n * f, d);
        let mut x_tar = Mat::zeros(n * f, d);
        let mut ts = Vec::with_capacity(n);
        let mut cond = Vec::with_capacity(n);
        for b in 0..n {
            let c = self.world.sample_conds(1, &mut self.ode_rng)[0];
            let noise = normal_mat(1, f * d, &mut self.ode_rng);
            let t = timesteps[self.ode_rng.random_range(0..timesteps.len())];
            let rec = self.world.integrate_flow(&self.schedule, &grid, noise.row(0), c)?;
            let idx = t as usize * self.cfg.ode_steps / t_total;
            x_t.data[b * f * d..(b + 1) * f * d].copy_from_slice(rec.states.row(idx));
            x_tar.data[b * f * d..(b + 1) * f * d].copy_from_slice(rec.endpoint());
            ts.push(t);
            cond.push(c);
        }
        Ok((x_t, ts, x_tar, cond))
    }

    /// Regression of the generator's clean estimates onto teacher-flow endpoints.
    pub fn prefit(&mut self) -> Result<Vec<f64>> {
        if self.cfg.prefit_steps == 0 {
            return Ok(Vec::new());
        }
        let mut opt = AdamW::new(self.cfg.adam(self.cfg.prefit_lr), self.generator.params())?;
        let timesteps = self.cfg.prefit_timesteps.clone();
        let mut losses = Vec::with_capacity(self.cfg.prefit_steps);
        for step in 0..self.cfg.prefit_steps {
            let (x_t, ts, x_tar, cond) = self.ode_pairs(self.cfg.batch_size, &timesteps)?;
            let mut g = Graph::new();
            let p = self.generator.bind(&mut g, true);
            let loss = forward_kl_surrogate(&mut g, &self.generator, &p, &x_t, &ts, &x_tar, &cond, &self.schedule)?;
            let value = g.scalar_value(loss);
            check_finite(step, "prefit loss", value, &x_t, self.dump_dir.as_ref())?;
            let grads = p.grads(&g.backward(loss)?, self.generator.params());
            opt.step(self.generator.params_mut(), &grads)?;
            losses.push(value);
        }
        self.generator_ema.copy_from(self.generator.params())?;
        Ok(losses)
    }

    fn rollout(&self, g: &mut Graph, p: &Bound, noise: &Mat, cond: &[usize]) -> Result<Var> {
        let noise = g.constant(noise.clone());
        self.generator.rollout_one_step(g, p, noise, cond, &self.schedule)
    }

    /// One generator update on its own minibatch. Returns
    /// `(L_DMD, L_G_adv, gradient norm)`.
    pub fn generator_step(&mut self, iter: usize) -> Result<(f64, f64, f64)> {
        let (b, f, d) = self.shape();
        let cfg = self.cfg.clone();
        let s = &mut self.gen_streams;
        let cond = self.world.sample_conds(b, &mut s.world);
        let noise = normal_mat(b * f, d, &mut s.rollout);
        let t_dmd = sample_timesteps(b, cfg.t_min, cfg.t_max, &mut s.noise);
        let eps_dmd = normal_mat(b * f, d, &mut s.noise);
        let t_adv = sample_timesteps(b, cfg.t_min, cfg.t_max, &mut s.noise);
        let eps_adv = normal_mat(b * f, d, &mut s.noise);

        let mut g = Graph::new();
        let pg = self.generator.bind(&mut g, true);
        let pc = self.critic.bind(&mut g, false);
        let x_theta = self.rollout(&mut g, &pg, &noise, &cond)?;
        let fake = CriticScore { net: &self.critic, params: &pc };
        let real = OracleScore { world: self.world, schedule: self.schedule };
        let dmd = dmd_generator_loss(&mut g, x_theta, &fake, &real, &t_dmd, &eps_dmd, &cond, &self.schedule)?;
        let l_dmd = g.scalar_value(dmd.loss);
        let mut total = dmd.loss;

        let x_adv = corrupt_var(&mut g, x_theta, &eps_adv, &t_adv, &self.schedule)?;
        let out = self.critic.critic_forward(&mut g, &pc, x_adv, &t_adv, &cond)?;
        let g_adv = adv_generator_loss(&mut g, out.logit);
        let l_g_adv = g.scalar_value(g_adv);
        if cfg.weights.lambda_g > 0.0 {
            let w = g.scale(g_adv, cfg.weights.lambda_g);
            total = g.add(total, w)?;
        }
        if cfg.weights.lambda_fkl > 0.0 {
            let (x_t0, t0, x_tar, c_fkl) = self.ode_pairs(b, &[cfg.num_timesteps])?;
            let fkl = forward_kl_surrogate(&mut g, &self.generator, &pg, &x_t0, &t0, &x_tar, &c_fkl, &self.schedule)?;
            let w = g.scale(fkl, cfg.weights.lambda_fkl);
            total = g.add(total, w)?;
        }
        let x_val = g.value(x_theta).clone();
        check_finite(iter, "L_DMD", l_dmd, &x_val, self.dump_dir.as_ref())?;
        check_finite(iter, "L_G_adv", l_g_adv, &x_val, self.dump_dir.as_ref())?;
        check_finite(iter, "generator loss", g.scalar_value(total), &x_val, self.dump_dir.as_ref())?;
        let grads = pg.grads(&g.backward(total)?, self.generator.params());
        let gn = grad_norm(&grads);
        check_finite(iter, "generator gradient norm", gn, &x_val, self.dump_dir.as_ref())?;
        self.opt_g.step(self.generator.params_mut(), &grads)?;
        Ok((l_dmd, l_g_adv, gn))
    }

    /// The discriminator's positive batch and its conditions.
    fn real_batch(&mut self) -> Result<(Mat, Vec<usize>)> {
        let (b, f, d) = self.shape();
        match self.cfg.disc_target {
            DiscTarget::RealData => {
                let (x, cond) = self.world.sample_batch(b, &mut self.critic_streams.world);
                Ok((x.reshaped(b * f, d)?, cond))
            }
            DiscTarget::SelfDistilled => {
                let cond = self.world.sample_conds(b, &mut self.critic_streams.world);
                let noise = normal_mat(b * f, d, &mut self.target_streams.rollout);
                let steps = SampleConfig {
                    first_block_timesteps: self.cfg.target_timesteps.clone(),
                    later_block_timesteps: self.cfg.target_timesteps.clone(),
                    renoise: Renoise::Deterministic,
                };
                let mut g = Graph::new();
                let p = self.generator.bind(&mut g, false);
                let nv = g.constant(noise);
                let mut cache = KvCache::new();
                let out = rollout_steps(
                    &mut g,
                    &self.generator,
                    &p,
                    &mut cache,
                    nv,
                    &cond,
                    &steps,
                    &self.schedule,
                    &mut self.target_streams.noise,
                )?;
                Ok((g.value(out).clone(), cond))
            }
        }
    }

    /// Fake-score denoising updates on the current generator's samples.
    pub fn warmup_critic(&mut self) -> Result<Vec<f64>> {
        let (b, f, d) = self.shape();
        let mut losses = Vec::with_capacity(self.cfg.critic_warmup_steps);
        for step in 0..self.cfg.critic_warmup_steps {
            let s = &mut self.critic_streams;
            let cond = self.world.sample_conds(b, &mut s.world);
            let noise = normal_mat(b * f, d, &mut s.rollout);
            let t = sample_timesteps(b, self.cfg.t_min, self.cfg.t_max, &mut s.noise);
            let eps = normal_mat(b * f, d, &mut s.noise);
            let x_fake = {
                let mut g = Graph::new();
                let p = self.generator.bind(&mut g, false);
                let x = self.rollout(&mut g, &p, &noise, &cond)?;
                g.value(x).clone()
            };
            let mut g = Graph::new();
            let pc = self.critic.bind(&mut g, true);
            let x_t = g.constant(self.schedule.corrupt_rows(&x_fake, &eps, &t)?);
            let out = self.critic.critic_forward(&mut g, &pc, x_t, &t, &cond)?;
            let loss = denoising_loss(&mut g, out.velocity, &x_fake, &eps)?;
            let value = g.scalar_value(loss);
            check_finite(step, "critic warm-up loss", value, &x_fake, self.dump_dir.as_ref())?;
            let grads = pc.grads(&g.backward(loss)?, self.critic.params());
            self.opt_c.step(self.critic.params_mut(), &grads)?;
            losses.push(value);
        }
        Ok(losses)
    }

    /// One critic update: fake-score denoising plus the weighted
    /// discriminator loss. Returns `(L_fake, L_D_adv, l_real, l_fake, gnorm)`.
    pub fn critic_step(&mut self, iter: usize) -> Result<(f64, f64, f64, f64, f64)> {
        let (b, f, d) = self.shape();
        let cfg = self.cfg.clone();
        let (x_real, cond) = self.real_batch()?;
        let s = &mut self.critic_streams;
        let noise = normal_mat(b * f, d, &mut s.rollout);
        let t_f = sample_timesteps(b, cfg.t_min, cfg.t_max, &mut s.noise);
        let eps_f = normal_mat(b * f, d, &mut s.noise);
        let eps_r = normal_mat(b * f, d, &mut s.noise);

        let x_fake = {
            let mut g = Graph::new();
            let p = self.generator.bind(&mut g, false);
            let x = self.rollout(&mut g, &p, &noise, &cond)?;
            g.value(x).clone()
        };
        let mut g = Graph::new();
        let pc = self.critic.bind(&mut g, true);
        let xf_t = g.constant(self.schedule.corrupt_rows(&x_fake, &eps_f, &t_f)?);
        let out_f = self.critic.critic_forward(&mut g, &pc, xf_t, &t_f, &cond)?;
        let l_fake = denoising_loss(&mut g, out_f.velocity, &x_fake, &eps_f)?;
        let xr_t = g.constant(self.schedule.corrupt_rows(&x_real, &eps_r, &t_f)?);
        let out_r = self.critic.critic_forward(&mut g, &pc, xr_t, &t_f, &cond)?;
        let l_d = adv_discriminator_loss(&mut g, out_r.logit, out_f.logit)?;
        let wd = g.scale(l_d, cfg.weights.lambda_d);
        let total = g.add(l_fake, wd)?;
        let (lf, ld) = (g.scalar_value(l_fake), g.scalar_value(l_d));
        let mean_r = g.value(out_r.logit).mean();
        let mean_f = g.value(out_f.logit).mean();
        check_finite(iter, "L_fake", lf, &x_fake, self.dump_dir.as_ref())?;
        check_finite(iter, "L_D_adv", ld, &x_fake, self.dump_dir.as_ref())?;
        let grads = pc.grads(&g.backward(total)?, self.critic.params());
        let gn = grad_norm(&grads);
        check_finite(iter, "critic gradient norm", gn, &x_fake, self.dump_dir.as_ref())?;
        self.opt_c.step(self.critic.params_mut(), &grads)?;
        Ok((lf, ld, mean_r, mean_f, gn))
    }

    /// Iteration `iter`: a generator update first when `iter mod K = 0`,
    /// then a critic update, then the EMA.
    pub fn train_step(&mut self, iter: usize) -> Result<&TrainRow> {
        let start = *self.started.get_or_insert_with(Instant::now);
        let gen = if iter % self.cfg.generator_interval == 0 { Some(self.generator_step(iter)?) } else { None };
        let (l_fake, l_d_adv, l_real, l_fake_logit, gnorm_c) = self.critic_step(iter)?;
        if gen.is_some() {
            if iter >= self.cfg.ema_start {
                ema_update(&mut self.generator_ema, self.generator.params(), self.cfg.ema_decay)?;
            } else {
                self.generator_ema.copy_from(self.generator.params())?;
            }
        }
        let wall_ms = self.cfg.record_wall_ms.then(|| start.elapsed().as_secs_f64() * 1e3);
        self.log.rows.push(TrainRow {
            iter,
            l_fake,
            l_d_adv,
            l_dmd: gen.map(|g| g.0),
            l_g_adv: gen.map(|g| g.1),
            l_real,
            l_fake_logit,
            gap: (l_real - l_fake_logit).abs(),
            gnorm_g: gen.map(|g| g.2),
            gnorm_c,
            wall_ms,
        });
        Ok(self.log.rows.last().expect("row just pushed"))
    }

    pub fn ema_generator(&self) -> Result<GeneratorNet> {
        let mut net = self.generator.clone();
        net.params_mut().copy_from(&self.generator_ema)?;
        Ok(net)
    }

    /// Checkpoints for the raw generator, its EMA and the critic.
    pub fn checkpoints(&self, meta: serde_json::Value) -> Result<[Checkpoint; 3]> {
        Ok([
            Checkpoint::from_generator(&self.generator, meta.clone()),
            Checkpoint::from_generator(&self.ema_generator()?, meta.clone()),
            Checkpoint::from_critic(&self.critic, meta),
        ])
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub prefit_losses: Vec<f64>,
    /// Generator after the pre-fit, before adversarial training.
    pub initial_generator: GeneratorNet,
    pub generator: GeneratorNet,
    pub generator_ema: GeneratorNet,
    pub critic: CriticNet,
}

/// Pre-fit followed by `iterations` interleaved updates. `on_checkpoint` is
/// called every `checkpoint_every` iterations with the trainer state.
pub fn run_with(
    cfg: &TrainConfig,
    model: &ModelConfig,
    world: &GaussianWorld,
    seed: u64,
    mut on_checkpoint: impl FnMut(usize, &Trainer) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut tr = Trainer::new(cfg.clone(), model.clone(), world, seed)?;
    let prefit_losses = tr.prefit()?;
    tr.warmup_critic()?;
    let initial_generator = tr.generator.clone();
    for i in 0..cfg.iterations {
        tr.train_step(i)?;
        if cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(i + 1, &tr)?;
        }
    }
    let generator_ema = tr.ema_generator()?;
    Ok(TrainOutcome {
        log: tr.log,
        prefit_losses,
        initial_generator,
        generator: tr.generator,
        generator_ema,
        critic: tr.critic,
    })
}

pub fn run(cfg: &TrainConfig, model: &ModelConfig, world: &GaussianWorld, seed: u64) -> Result<TrainOutcome> {
    run_with(cfg, model, world, seed, |_, _| Ok(()))
}

/// Moving averages of a series with a trailing window.
pub fn smooth(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window > values.len() {
        return Err(contract(format!("window {window} for {} values", values.len())));
    }
    Ok(values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect())
}
