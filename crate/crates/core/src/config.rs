//! Experiment configuration files.
//!
//! One `section.key = value` assignment per line; `#` starts a comment.
//! Lists are comma-separated. Every key is optional, unknown or repeated
//! keys are rejected, and the assembled configuration is validated before
//! it is returned. See [`KEYS`] for the full key list.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::{uniform_timesteps, Renoise, SampleConfig};
use crate::synthworld::{GaussianWorld, WorldConfig, WorldKind};
use crate::trainer::{DiscTarget, TrainConfig};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("world.kind", "gauss-ssm | bimodal-ssm"),
    ("world.dim", "latent dimension per frame"),
    ("world.frames", "frames per sequence"),
    ("world.conditional", "condition oracles and networks on the mode label (true | false)"),
    ("world.guidance", "classifier-free guidance scale of the oracle; 1 disables it"),
    ("model.width", "transformer width"),
    ("model.layers", "transformer layers"),
    ("model.heads", "attention heads"),
    ("model.mlp_ratio", "MLP hidden size as a multiple of the width"),
    ("model.block_size", "frames per autoregressive block"),
    ("model.registers", "critic register tokens, one per tapped layer"),
    ("model.tapped_layers", "zero-based layers read by the registers, comma-separated"),
    ("model.disc_hidden", "hidden size of the logit MLP"),
    ("model.causal_critic", "block-causal critic attention (true | false)"),
    ("train.generator_interval", "K: one generator update every K iterations"),
    ("train.lambda_g", "generator adversarial weight"),
    ("train.lambda_d", "critic adversarial weight"),
    ("train.lambda_fkl", "forward-KL regression weight"),
    ("train.lr_generator", "generator learning rate"),
    ("train.lr_critic", "critic learning rate"),
    ("train.beta1", "Adam beta1"),
    ("train.beta2", "Adam beta2"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.ema_decay", "EMA decay"),
    ("train.ema_start", "first iteration with a decaying EMA"),
    ("train.iterations", "training iterations"),
    ("train.batch_size", "sequences per minibatch"),
    ("train.num_timesteps", "discrete timesteps T"),
    ("train.shift", "schedule shift k"),
    ("train.t_min", "smallest critic/DMD timestep"),
    ("train.t_max", "largest critic/DMD timestep"),
    ("train.disc_target", "real-data | self-distilled"),
    ("train.target_timesteps", "timesteps of the self-distilled target rollout"),
    ("train.prefit_steps", "generator regression steps before training"),
    ("train.prefit_lr", "pre-fit learning rate"),
    ("train.prefit_timesteps", "timesteps of the pre-fit regression pairs"),
    ("train.critic_warmup_steps", "denoising-only critic steps before training"),
    ("train.ode_steps", "Euler steps of the teacher flow"),
    ("train.checkpoint_every", "checkpoint interval in iterations; 0 saves only at the end"),
    ("train.record_wall_ms", "log wall-clock time (makes logs run-dependent)"),
    ("sample.first_block_steps", "denoising steps of the first block"),
    ("sample.later_block_steps", "denoising steps of every later block"),
    ("sample.renoise", "deterministic | fresh"),
    ("sample.num_samples", "sequences written by `sample`"),
    ("eval.world_samples", "fresh world sequences compared against"),
    ("eval.projections", "sliced Wasserstein projections"),
    ("eval.window", "final iterations summarized by the logit-gap statistics"),
    ("paths.out_dir", "output directory, relative to the config file"),
    ("run.seed", "root seed"),
    ("run.seeds", "seeds of paired ablation runs, comma-separated"),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorldSection {
    pub kind: WorldKind,
    pub dim: usize,
    pub frames: usize,
    pub conditional: Option<bool>,
    pub guidance: f64,
}

impl WorldSection {
    pub fn world_config(&self) -> WorldConfig {
        let mut wc = WorldConfig::preset(self.kind, self.dim, self.frames);
        if let Some(c) = self.conditional {
            wc.conditional = c;
        }
        wc
    }

    pub fn build(&self) -> Result<GaussianWorld> {
        Ok(GaussianWorld::new(self.world_config())?.with_guidance(self.guidance))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleSection {
    pub first_block_steps: usize,
    pub later_block_steps: usize,
    pub renoise: Renoise,
    pub num_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSection {
    pub world_samples: usize,
    pub projections: usize,
    pub window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub world: WorldSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let world = WorldSection { kind: WorldKind::GaussSsm, dim: 4, frames: 8, conditional: None, guidance: 1.0 };
        let model = ModelConfig { frame_dim: world.dim, frames: world.frames, ..ModelConfig::default() };
        Self {
            world,
            model,
            train,
            sample: SampleSection { first_block_steps: 4, later_block_steps: 1, renoise: Renoise::Deterministic, num_samples: 256 },
            eval: EvalSection { world_samples: 2000, projections: 128, window: 100 },
            out_dir: PathBuf::from("out"),
            seed: 0,
            seeds: vec![0, 1, 2],
        }
    }
}

fn bad(line: usize, key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {key}: {msg}"))
}

fn rekey(line: usize, key: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => bad(line, key, m),
        other => other,
    }
}

fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(line, key, format!("cannot parse `{v}`")))
}

fn list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| num(line, key, s.trim())).collect()
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(line, key, format!("expected true or false, got `{v}`"))),
    }
}

impl ExperimentConfig {
    /// Parses and validates a configuration. Relative output paths are
    /// resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut c = Self::default();
        let mut train_timesteps_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `section.key = value`")))?;
            let (key, v) = (key.trim(), value.trim().trim_matches('"'));
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(bad(line, key, format!("already set on line {prev}")));
            }
            let (w, m, t, s) = (&mut c.world, &mut c.model, &mut c.train, &mut c.sample);
            match key {
                "world.kind" => w.kind = WorldKind::parse(v).map_err(|e| rekey(line, key, e))?,
                "world.dim" => w.dim = num(line, key, v)?,
                "world.frames" => w.frames = num(line, key, v)?,
                "world.conditional" => w.conditional = Some(boolean(line, key, v)?),
                "world.guidance" => w.guidance = num(line, key, v)?,
                "model.width" => m.width = num(line, key, v)?,
                "model.layers" => m.layers = num(line, key, v)?,
                "model.heads" => m.heads = num(line, key, v)?,
                "model.mlp_ratio" => m.mlp_ratio = num(line, key, v)?,
                "model.block_size" => m.block_size = num(line, key, v)?,
                "model.registers" => m.registers = num(line, key, v)?,
                "model.tapped_layers" => m.tapped_layers = list(line, key, v)?,
                "model.disc_hidden" => m.disc_hidden = num(line, key, v)?,
                "model.causal_critic" => m.causal_critic = boolean(line, key, v)?,
                "train.generator_interval" => t.generator_interval = num(line, key, v)?,
                "train.lambda_g" => t.weights.lambda_g = num(line, key, v)?,
                "train.lambda_d" => t.weights.lambda_d = num(line, key, v)?,
                "train.lambda_fkl" => t.weights.lambda_fkl = num(line, key, v)?,
                "train.lr_generator" => t.lr_generator = num(line, key, v)?,
                "train.lr_critic" => t.lr_critic = num(line, key, v)?,
                "train.beta1" => t.beta1 = num(line, key, v)?,
                "train.beta2" => t.beta2 = num(line, key, v)?,
                "train.weight_decay" => t.weight_decay = num(line, key, v)?,
                "train.ema_decay" => t.ema_decay = num(line, key, v)?,
                "train.ema_start" => t.ema_start = num(line, key, v)?,
                "train.iterations" => t.iterations = num(line, key, v)?,
                "train.batch_size" => t.batch_size = num(line, key, v)?,
                "train.num_timesteps" => t.num_timesteps = num(line, key, v)?,
                "train.shift" => t.shift = num(line, key, v)?,
                "train.t_min" => t.t_min = num(line, key, v)?,
                "train.t_max" => t.t_max = num(line, key, v)?,
                "train.disc_target" => t.disc_target = DiscTarget::parse(v).map_err(|e| rekey(line, key, e))?,
                "train.target_timesteps" | "train.prefit_timesteps" => {
                    train_timesteps_set = true;
                    let ts = list(line, key, v)?;
                    if key == "train.target_timesteps" {
                        t.target_timesteps = ts;
                    } else {
                        t.prefit_timesteps = ts;
                    }
                }
                "train.prefit_steps" => t.prefit_steps = num(line, key, v)?,
                "train.prefit_lr" => t.prefit_lr = num(line, key, v)?,
                "train.critic_warmup_steps" => t.critic_warmup_steps = num(line, key, v)?,
                "train.ode_steps" => t.ode_steps = num(line, key, v)?,
                "train.checkpoint_every" => t.checkpoint_every = num(line, key, v)?,
                "train.record_wall_ms" => t.record_wall_ms = boolean(line, key, v)?,
                "sample.first_block_steps" => s.first_block_steps = num(line, key, v)?,
                "sample.later_block_steps" => s.later_block_steps = num(line, key, v)?,
                "sample.renoise" => s.renoise = Renoise::parse(v).map_err(|e| rekey(line, key, e))?,
                "sample.num_samples" => s.num_samples = num(line, key, v)?,
                "eval.world_samples" => c.eval.world_samples = num(line, key, v)?,
                "eval.projections" => c.eval.projections = num(line, key, v)?,
                "eval.window" => c.eval.window = num(line, key, v)?,
                "paths.out_dir" => c.out_dir = PathBuf::from(v),
                "run.seed" => c.seed = num(line, key, v)?,
                "run.seeds" => c.seeds = list(line, key, v)?,
                _ => return Err(bad(line, key, "unknown key")),
            }
        }
        if !train_timesteps_set && c.train.num_timesteps != 1000 {
            let t = c.train.num_timesteps;
            c.train.target_timesteps = vec![t, t - t / 4];
            c.train.prefit_timesteps = uniform_timesteps(4, t);
        }
        if c.out_dir.is_relative() {
            c.out_dir = base.join(&c.out_dir);
        }
        c.sync_model();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Copies the world- and schedule-derived fields into the model config.
    pub fn sync_model(&mut self) {
        let wc = self.world.world_config();
        self.model.frame_dim = wc.dim;
        self.model.frames = wc.frames;
        self.model.num_conditions = wc.num_conditions();
        self.model.num_timesteps = self.train.num_timesteps;
    }

    /// Replaces the learning rates with [`TrainConfig::paper_scale`] values.
    pub fn apply_paper_hparams(&mut self) {
        let p = TrainConfig::paper_scale();
        self.train.lr_generator = p.lr_generator;
        self.train.lr_critic = p.lr_critic;
        self.train.prefit_lr = p.prefit_lr;
    }

    pub fn sample_config(&self) -> SampleConfig {
        let t = self.train.num_timesteps;
        SampleConfig {
            first_block_timesteps: uniform_timesteps(self.sample.first_block_steps, t),
            later_block_timesteps: uniform_timesteps(self.sample.later_block_steps, t),
            renoise: self.sample.renoise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.world_config().validate()?;
        if !(self.world.guidance.is_finite() && self.world.guidance >= 0.0) {
            return Err(Error::Config(format!("world.guidance must be non-negative, got {}", self.world.guidance)));
        }
        self.model.validate()?;
        self.train.validate()?;
        let s = &self.sample;
        if s.first_block_steps == 0 || s.later_block_steps == 0 || s.num_samples == 0 {
            return Err(Error::Config("sample step counts and num_samples must be positive".into()));
        }
        self.sample_config().validate(&self.train.schedule()?)?;
        let e = &self.eval;
        if e.world_samples == 0 || e.projections == 0 || e.window == 0 {
            return Err(Error::Config("eval.world_samples, eval.projections and eval.window must be positive".into()));
        }
        if e.window > self.train.iterations {
            return Err(Error::Config(format!(
                "eval.window {} exceeds train.iterations {}",
                e.window, self.train.iterations
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("run.seeds must list at least one seed".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("/base"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("# nothing\n\n").unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.out_dir, PathBuf::from("/base/out"));
        assert_eq!(c.model.frames, 8);
    }

    #[test]
    fn keys_are_applied() {
        let c = parse(
            "world.kind = bimodal-ssm\nworld.frames = 6 # trailing comment\nmodel.width = 16\n\
             model.tapped_layers = 0, 2\ntrain.disc_target = self-distilled\n\
             train.lambda_fkl = 1\nsample.renoise = fresh\nrun.seed = 7\nrun.seeds = 3,4\n\
             paths.out_dir = \"/abs\"\n",
        )
        .unwrap();
        assert_eq!(c.world.kind, WorldKind::BimodalSsm);
        assert_eq!(c.model.frames, 6);
        assert_eq!(c.model.width, 16);
        assert_eq!(c.model.tapped_layers, vec![0, 2]);
        assert_eq!(c.train.disc_target, DiscTarget::SelfDistilled);
        assert_eq!(c.train.weights.lambda_fkl, 1.0);
        assert_eq!(c.sample.renoise, Renoise::Fresh);
        assert_eq!((c.seed, c.seeds.clone()), (7, vec![3, 4]));
        assert_eq!(c.out_dir, PathBuf::from("/abs"));
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let c = ExperimentConfig::default();
        for (key, _) in KEYS {
            let value = match *key {
                "world.kind" => "gauss-ssm",
                "world.conditional" | "model.causal_critic" | "train.record_wall_ms" => "false",
                "model.tapped_layers" => "1, 3",
                "train.disc_target" => "real-data",
                "train.target_timesteps" => "1000, 750",
                "train.prefit_timesteps" => "1000, 500",
                "sample.renoise" => "deterministic",
                "paths.out_dir" => "x",
                "run.seeds" => "1",
                "train.num_timesteps" => "1000",
                "train.shift" => "5",
                "train.t_min" => "20",
                "train.t_max" => "980",
                "model.heads" | "model.registers" => "2",
                "model.layers" => "4",
                "model.width" | "model.disc_hidden" => "16",
                "train.iterations" | "eval.window" => "100",
                "train.ode_steps" => "40",
                "train.ema_decay" | "train.lr_generator" | "train.lr_critic" | "train.prefit_lr" | "train.beta1" | "train.beta2" => "0.5",
                _ => "1",
            };
            let text = format!("{key} = {value}\n{}", if *key == "model.registers" { "model.tapped_layers = 1, 3\n" } else { "" });
            parse(&text).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
        assert!(c.validate().is_ok());
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "world.colour = red",
            "nonsense",
            "train.iterations = many",
            "train.iterations = 5\ntrain.iterations = 6",
            "train.generator_interval = 0",
            "model.width = 10\nmodel.heads = 4",
            "model.causal_critic = yes",
            "train.disc_target = imaginary",
            "sample.first_block_steps = 0",
            "eval.window = 400",
            "world.guidance = -1",
        ] {
            assert!(matches!(parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse("run.seed = 1\nworld.colour = red").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("world.colour"), "{e}");
    }

    #[test]
    fn derived_model_fields_follow_world_and_schedule() {
        let c = parse("world.kind = bimodal-ssm\nworld.conditional = true\nworld.dim = 3\ntrain.num_timesteps = 100\ntrain.t_max = 98").unwrap();
        assert_eq!((c.model.frame_dim, c.model.num_conditions, c.model.num_timesteps), (3, 2, 100));
        assert_eq!(c.train.prefit_timesteps, vec![100, 75, 50, 25]);
        assert_eq!(c.sample_config().first_block_timesteps, vec![100, 75, 50, 25]);
    }
}
