//! Inference rollouts: multi-step block denoising and first-frame enhancement
//! (extra denoising steps for the first block only).

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::model::{Bound, GeneratorNet, KvCache};
use crate::rng::{indexed_substream, normal_mat, StreamRng, ROLLOUT};
use crate::schedule::NoiseSchedule;
use crate::tensor::Mat;

/// How a block is moved to the next timestep between denoising steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Renoise {
    /// Reuse the noise implied by the current prediction (an Euler step).
    Deterministic,
    /// Corrupt the clean estimate with fresh Gaussian noise.
    Fresh,
}

impl Renoise {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Renoise::Deterministic),
            "fresh" => Ok(Renoise::Fresh),
            other => Err(Error::Config(format!("unknown renoise mode `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Renoise::Deterministic => "deterministic",
            Renoise::Fresh => "fresh",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub first_block_timesteps: Vec<u32>,
    pub later_block_timesteps: Vec<u32>,
    pub renoise: Renoise,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self::with_steps(4, 1, 1000)
    }
}

/// `n` timesteps uniform in `t`, starting at `num_timesteps`: 4 steps of 1000
/// give `[1000, 750, 500, 250]`.
pub fn uniform_timesteps(n: usize, num_timesteps: u32) -> Vec<u32> {
    let t = num_timesteps as u64;
    (0..n as u64).map(|i| (t - i * t / n as u64) as u32).collect()
}

impl SampleConfig {
    pub fn with_steps(first: usize, later: usize, num_timesteps: u32) -> Self {
        Self {
            first_block_timesteps: uniform_timesteps(first, num_timesteps),
            later_block_timesteps: uniform_timesteps(later, num_timesteps),
            renoise: Renoise::Deterministic,
        }
    }

    pub fn first_block_steps(&self) -> usize {
        self.first_block_timesteps.len()
    }

    pub fn later_block_steps(&self) -> usize {
        self.later_block_timesteps.len()
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        validate_steps(&self.first_block_timesteps, schedule)?;
        validate_steps(&self.later_block_timesteps, schedule)
    }

    /// Network evaluations for a sequence of `blocks` blocks.
    pub fn expected_nfe(&self, blocks: usize) -> usize {
        if blocks == 0 {
            return 0;
        }
        self.first_block_steps() + (blocks - 1) * self.later_block_steps()
    }
}

/// Steps must start at the highest timestep, strictly descend, and stay above 0.
pub fn validate_steps(steps: &[u32], schedule: &NoiseSchedule) -> Result<()> {
    if steps.first() != Some(&schedule.num_timesteps()) {
        return Err(contract(format!(
            "denoising schedule {steps:?} must start at {}",
            schedule.num_timesteps()
        )));
    }
    if steps.windows(2).any(|w| w[1] >= w[0]) || steps.last() == Some(&0) {
        return Err(contract(format!("denoising schedule {steps:?} must strictly descend above 0")));
    }
    Ok(())
}

/// Denoises the current block of a cached rollout along `steps` and pushes
/// the clean result into the cache as context for the next block.
#[allow(clippy::too_many_arguments)]
pub fn denoise_block(
    g: &mut Graph,
    net: &GeneratorNet,
    params: &Bound,
    cache: &mut KvCache,
    noise: Var,
    cond: &[usize],
    steps: &[u32],
    schedule: &NoiseSchedule,
    renoise: Renoise,
    rng: &mut StreamRng,
) -> Result<Var> {
    validate_steps(steps, schedule)?;
    let batch = cond.len();
    let mut x = noise;
    for (j, &t) in steps.iter().enumerate() {
        let sigma = schedule.sigma_at(t)?;
        let v = net.generator_forward(g, params, cache, x, &vec![t; batch], cond)?;
        let sv = g.scale(v, sigma);
        let x0 = g.sub(x, sv)?;
        let Some(&t_next) = steps.get(j + 1) else {
            cache.push_clean(g, x0)?;
            return Ok(x0);
        };
        let s_next = schedule.sigma_at(t_next)?;
        x = match renoise {
            Renoise::Deterministic => {
                let step = g.scale(v, s_next - sigma);
                g.add(x, step)?
            }
            Renoise::Fresh => {
                let (r, c) = g.shape(x0);
                let eps = g.constant(normal_mat(r, c, rng).scale(s_next));
                let keep = g.scale(x0, 1.0 - s_next);
                g.add(keep, eps)?
            }
        };
    }
    Err(contract("empty denoising schedule"))
}

/// Full multi-step rollout from per-block noise `[B·F, d]`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_steps(
    g: &mut Graph,
    net: &GeneratorNet,
    params: &Bound,
    cache: &mut KvCache,
    noise: Var,
    cond: &[usize],
    cfg: &SampleConfig,
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<Var> {
    let mc = net.config();
    let batch = cond.len();
    let bs = mc.block_size;
    if g.shape(noise) != (batch * mc.frames, mc.frame_dim) {
        return Err(Error::Shape(format!("noise {:?} for batch {batch}", g.shape(noise))));
    }
    let mut out: Option<Var> = None;
    for k in 0..mc.num_blocks() {
        let steps = if k == 0 { &cfg.first_block_timesteps } else { &cfg.later_block_timesteps };
        let x = g.slice_tokens(noise, batch, k * bs, bs)?;
        let x0 = denoise_block(g, net, params, cache, x, cond, steps, schedule, cfg.renoise, rng)?;
        out = Some(match out {
            None => x0,
            Some(prev) => g.cat_tokens(prev, x0, batch)?,
        });
    }
    out.ok_or_else(|| contract("model has no blocks"))
}

/// Initial per-block noise for `batch` sequences under `seed`.
pub fn initial_noise(net: &GeneratorNet, batch: usize, seed: u64) -> Mat {
    let mc = net.config();
    normal_mat(batch * mc.frames, mc.frame_dim, &mut indexed_substream(seed, ROLLOUT, 0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    /// Sequences in token layout `[B·F, d]`.
    pub sequences: Mat,
    pub nfe: usize,
}

/// First-frame-enhanced sampling of one sequence per entry of `cond`.
pub fn sample_ffe(net: &GeneratorNet, cond: &[usize], cfg: &SampleConfig, seed: u64, schedule: &NoiseSchedule) -> Result<Sampled> {
    cfg.validate(schedule)?;
    let noise = initial_noise(net, cond.len(), seed);
    let mut rng = indexed_substream(seed, ROLLOUT, 1);
    let mut g = Graph::new();
    let p = net.bind(&mut g, false);
    let noise = g.constant(noise);
    let mut cache = KvCache::new();
    let out = rollout_steps(&mut g, net, &p, &mut cache, noise, cond, cfg, schedule, &mut rng)?;
    Ok(Sampled { sequences: g.value(out).clone(), nfe: cache.nfe() })
}

/// One-step rollout with the same noise draw as [`sample_ffe`].
pub fn sample_one_step(net: &GeneratorNet, cond: &[usize], seed: u64, schedule: &NoiseSchedule) -> Result<Sampled> {
    let noise = initial_noise(net, cond.len(), seed);
    let mut g = Graph::new();
    let p = net.bind(&mut g, false);
    let noise = g.constant(noise);
    let mut cache = KvCache::new();
    let out = net.rollout_with_cache(&mut g, &p, &mut cache, noise, cond, schedule)?;
    Ok(Sampled { sequences: g.value(out).clone(), nfe: cache.nfe() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::substream;

    fn net(block_size: usize, frames: usize) -> GeneratorNet {
        let cfg = ModelConfig {
            frame_dim: 2,
            frames,
            width: 8,
            layers: 2,
            heads: 2,
            block_size,
            registers: 1,
            tapped_layers: vec![1],
            ..ModelConfig::default()
        };
        let mut n = GeneratorNet::new(cfg, 4).unwrap();
        let mut rng = substream(8, "head");
        for name in ["head.w_out", "head.b_out"] {
            let i = n.params().index_of(name).unwrap();
            let (r, c) = n.params().get(i).shape();
            *n.params_mut().get_mut(i) = Mat::randn(r, c, 0.3, &mut rng);
        }
        n
    }

    #[test]
    fn uniform_warmup_grid() {
        assert_eq!(uniform_timesteps(4, 1000), vec![1000, 750, 500, 250]);
        assert_eq!(uniform_timesteps(1, 1000), vec![1000]);
        assert_eq!(uniform_timesteps(3, 1000), vec![1000, 667, 334]);
    }

    #[test]
    fn step_schedule_validation() {
        let s = NoiseSchedule::default();
        assert!(validate_steps(&[1000, 500, 500], &s).is_err());
        assert!(validate_steps(&[900, 500], &s).is_err());
        assert!(validate_steps(&[1000, 0], &s).is_err());
        assert!(validate_steps(&[], &s).is_err());
        validate_steps(&[1000, 10], &s).unwrap();
    }

    #[test]
    fn ffe_nfe_accounting() {
        let s = NoiseSchedule::default();
        let n = net(1, 3);
        let cfg = SampleConfig::with_steps(4, 1, 1000);
        let out = sample_ffe(&n, &[0, 0], &cfg, 1, &s).unwrap();
        assert_eq!(out.nfe, 6);
        assert_eq!(out.nfe, cfg.expected_nfe(3));
        let cfg = SampleConfig::with_steps(3, 2, 1000);
        let n6 = net(2, 6);
        assert_eq!(sample_ffe(&n6, &[0], &cfg, 1, &s).unwrap().nfe, 3 + 2 * 2);
    }

    #[test]
    fn single_step_ffe_is_one_step_rollout() {
        let s = NoiseSchedule::default();
        for bs in [1, 2] {
            let n = net(bs, 4);
            let cfg = SampleConfig::with_steps(1, 1, 1000);
            let a = sample_ffe(&n, &[0, 0, 0], &cfg, 17, &s).unwrap();
            let b = sample_one_step(&n, &[0, 0, 0], 17, &s).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let s = NoiseSchedule::default();
        let n = net(1, 4);
        let mut cfg = SampleConfig::default();
        cfg.renoise = Renoise::Fresh;
        let a = sample_ffe(&n, &[0, 0], &cfg, 3, &s).unwrap();
        let b = sample_ffe(&n, &[0, 0], &cfg, 3, &s).unwrap();
        let c = sample_ffe(&n, &[0, 0], &cfg, 4, &s).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn later_blocks_depend_only_on_first_block_output() {
        // Pin the first block's output by reusing it as context: the later
        // blocks of a one-step rollout computed from the 4-step first block
        // equal those of a rollout whose first block is pushed directly.
        let s = NoiseSchedule::default();
        let n = net(1, 3);
        let ffe = sample_ffe(&n, &[0], &SampleConfig::default(), 5, &s).unwrap();
        let noise = initial_noise(&n, 1, 5);
        let mut g = Graph::new();
        let p = n.bind(&mut g, false);
        let mut cache = KvCache::new();
        let first = g.constant(ffe.sequences.slice_tokens(1, 3, 0, 1));
        let x0 = g.constant(noise.slice_tokens(1, 3, 0, 1));
        n.generator_forward(&mut g, &p, &mut cache, x0, &[1000], &[0]).unwrap();
        cache.push_clean(&g, first).unwrap();
        for k in 1..3 {
            let x = g.constant(noise.slice_tokens(1, 3, k, 1));
            let v = n.generator_forward(&mut g, &p, &mut cache, x, &[1000], &[0]).unwrap();
            let sv = g.scale(v, 1.0);
            let x0 = g.sub(x, sv).unwrap();
            cache.push_clean(&g, x0).unwrap();
            assert_eq!(g.value(x0), &ffe.sequences.slice_tokens(1, 3, k, 1));
        }
    }
}
