//! Training runs with before/after evaluation, and the paired ablations built on them.

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{logit_gap_stats, motion_proxy, sliced_wasserstein};
use crate::model::GeneratorNet;
use crate::rng::{indexed_substream, WORLD};
use crate::sampler::sample_one_step;
use crate::synthworld::GaussianWorld;
use crate::tensor::Mat;
use crate::trainer::{run, DiscTarget, TrainOutcome};

/// World-stream index of the held-out evaluation samples. Training uses 1 to 4.
const EVAL_ROLE: u64 = 16;

/// Quality of one-step samples against fresh world samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SampleQuality {
    pub sliced_wasserstein: f64,
    pub motion_proxy: f64,
}

/// Held-out world sequences `[N, F·d]` and their condition labels for `seed`.
pub fn eval_world_samples(world: &GaussianWorld, n: usize, seed: u64) -> (Mat, Vec<usize>) {
    world.sample_batch(n, &mut indexed_substream(seed, WORLD, EVAL_ROLE))
}

/// Scores one-step samples of `net` drawn for the conditions of `reference`.
pub fn evaluate_generator(
    net: &GeneratorNet,
    reference: &(Mat, Vec<usize>),
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<SampleQuality> {
    let (real, conds) = reference;
    let sched = cfg.train.schedule()?;
    let frames = cfg.model.frames;
    let s = sample_one_step(net, conds, seed, &sched)?.sequences.reshaped(conds.len(), real.cols)?;
    Ok(SampleQuality {
        sliced_wasserstein: sliced_wasserstein(&s, real, cfg.eval.projections, seed)?,
        motion_proxy: motion_proxy(&s, frames)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    /// Pre-fit generator before adversarial training.
    pub initial: SampleQuality,
    pub generator: SampleQuality,
    pub generator_ema: SampleQuality,
    pub world_motion: f64,
    pub gap_mean: f64,
    pub gap_std: f64,
}

impl RunSummary {
    /// Relative sliced Wasserstein reduction of the EMA generator over the initial one.
    pub fn sw_reduction(&self) -> f64 {
        1.0 - self.generator_ema.sliced_wasserstein / self.initial.sliced_wasserstein
    }
}

/// Trains under `cfg` with root `seed` and evaluates the result.
pub fn train_and_evaluate(cfg: &ExperimentConfig, seed: u64) -> Result<(TrainOutcome, RunSummary)> {
    let world = cfg.world.build()?;
    let out = run(&cfg.train, &cfg.model, &world, seed)?;
    let reference = eval_world_samples(&world, cfg.eval.world_samples, seed);
    let (gap_mean, gap_std) = logit_gap_stats(&out.log, cfg.eval.window)?;
    let summary = RunSummary {
        seed,
        initial: evaluate_generator(&out.initial_generator, &reference, cfg, seed)?,
        generator: evaluate_generator(&out.generator, &reference, cfg, seed)?,
        generator_ema: evaluate_generator(&out.generator_ema, &reference, cfg, seed)?,
        world_motion: motion_proxy(&reference.0, cfg.model.frames)?,
        gap_mean,
        gap_std,
    };
    Ok((out, summary))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    Fkl,
    DiscTarget,
}

impl AblationKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fkl" => Ok(Self::Fkl),
            "disc-target" => Ok(Self::DiscTarget),
            _ => Err(Error::Config(format!("unknown ablation `{s}` (expected fkl or disc-target)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Fkl => "fkl",
            Self::DiscTarget => "disc-target",
        }
    }

    /// Names of the baseline and ablated variants.
    pub fn variants(self) -> [&'static str; 2] {
        match self {
            Self::Fkl => ["lambda_fkl=0", "lambda_fkl=1"],
            Self::DiscTarget => ["real-data", "self-distilled"],
        }
    }

    fn configure(self, base: &ExperimentConfig, ablated: bool) -> ExperimentConfig {
        let mut c = base.clone();
        match self {
            Self::Fkl => c.train.weights.lambda_fkl = if ablated { 1.0 } else { 0.0 },
            Self::DiscTarget => {
                c.train.disc_target = if ablated { DiscTarget::SelfDistilled } else { DiscTarget::RealData }
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationPair {
    pub seed: u64,
    pub baseline: RunSummary,
    pub ablated: RunSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub variants: [&'static str; 2],
    pub pairs: Vec<AblationPair>,
    /// Seeds on which the ablated EMA generator moves strictly less than the baseline.
    pub motion_lower: usize,
    /// Mean logit gap of the baseline over that of the ablated runs.
    pub gap_ratio: f64,
}

/// Paired runs over `cfg.seeds` that differ only in the ablated setting.
pub fn ablate(cfg: &ExperimentConfig, kind: AblationKind) -> Result<AblationReport> {
    let mut pairs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (_, baseline) = train_and_evaluate(&kind.configure(cfg, false), seed)?;
        let (_, ablated) = train_and_evaluate(&kind.configure(cfg, true), seed)?;
        log::info!("{} seed {seed} done", kind.name());
        pairs.push(AblationPair { seed, baseline, ablated });
    }
    let motion_lower = pairs
        .iter()
        .filter(|p| p.ablated.generator_ema.motion_proxy < p.baseline.generator_ema.motion_proxy)
        .count();
    let mean = |f: &dyn Fn(&AblationPair) -> f64| pairs.iter().map(f).sum::<f64>() / pairs.len() as f64;
    let gap_ratio = mean(&|p| p.baseline.gap_mean) / mean(&|p| p.ablated.gap_mean);
    Ok(AblationReport { kind, variants: kind.variants(), pairs, motion_lower, gap_ratio })
}

impl AblationReport {
    /// Plain-text table with one row per seed and variant.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>5} {:>10} {:>10} {:>10} {:>9} {:>9}\n",
            "variant", "seed", "sw_init", "sw_ema", "motion", "gap_mean", "gap_std"
        );
        for p in &self.pairs {
            for (name, r) in self.variants.iter().zip([&p.baseline, &p.ablated]) {
                s.push_str(&format!(
                    "{:<16} {:>5} {:>10.4} {:>10.4} {:>10.4} {:>9.4} {:>9.4}\n",
                    name,
                    p.seed,
                    r.initial.sliced_wasserstein,
                    r.generator_ema.sliced_wasserstein,
                    r.generator_ema.motion_proxy,
                    r.gap_mean,
                    r.gap_std
                ));
            }
        }
        s.push_str(&format!(
            "{}: ablated motion lower on {}/{} seeds, gap ratio {:.3}\n",
            self.kind.name(),
            self.motion_lower,
            self.pairs.len(),
            self.gap_ratio
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use std::path::Path;

    fn tiny() -> ExperimentConfig {
        let text = "world.dim = 2\nworld.frames = 4\nmodel.width = 8\nmodel.heads = 2\nmodel.registers = 1\n\
                    model.tapped_layers = 1\ntrain.iterations = 6\ntrain.batch_size = 4\ntrain.prefit_steps = 5\n\
                    eval.world_samples = 50\neval.projections = 8\neval.window = 3\nrun.seeds = 3\n";
        ExperimentConfig::parse(text, Path::new(".")).unwrap()
    }

    #[test]
    fn ablation_kinds_round_trip() {
        for k in [AblationKind::Fkl, AblationKind::DiscTarget] {
            assert_eq!(AblationKind::parse(k.name()).unwrap(), k);
        }
        assert!(AblationKind::parse("nope").is_err());
    }

    #[test]
    fn paired_configs_differ_only_in_the_flag() {
        let base = tiny();
        let a = AblationKind::Fkl.configure(&base, false);
        let mut b = AblationKind::Fkl.configure(&base, true);
        assert_eq!(b.train.weights.lambda_fkl, 1.0);
        b.train.weights.lambda_fkl = 0.0;
        assert_eq!(a, b);
        let c = AblationKind::DiscTarget.configure(&base, true);
        assert_eq!(c.train.disc_target, DiscTarget::SelfDistilled);
    }

    #[test]
    fn small_ablation_is_deterministic() {
        let cfg = tiny();
        let r1 = ablate(&cfg, AblationKind::Fkl).unwrap();
        let r2 = ablate(&cfg, AblationKind::Fkl).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.pairs.len(), 1);
        let p = &r1.pairs[0];
        assert_eq!(p.baseline.initial, p.ablated.initial);
        assert!(r1.summary_table().lines().count() == 4);
    }
}
