//! Block-causal transformer generator with a KV cache, and the critic that
//! shares one backbone between a velocity head and a register-token
//! discriminator.
//!
//! Sequences use token layout: a batch of `B` sequences of `F` frames is a
//! `[B·F, d]` matrix, which is bit-identical to the flattened `[B, F·d]` view.

use std::io::{BufRead, Write};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Grads, Graph, Var};
use crate::error::{contract, Error, Result};
use crate::rng::{substream, StreamRng};
use crate::schedule::NoiseSchedule;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent dimension per frame.
    pub frame_dim: usize,
    pub frames: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Frames per autoregressive block.
    pub block_size: usize,
    pub num_conditions: usize,
    pub num_timesteps: u32,
    /// Critic register tokens; one per tapped layer.
    pub registers: usize,
    /// Zero-based backbone layers whose outputs feed the discriminator.
    pub tapped_layers: Vec<usize>,
    pub disc_hidden: usize,
    /// Block-causal instead of bidirectional critic attention.
    pub causal_critic: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_dim: 4,
            frames: 8,
            width: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 2,
            block_size: 1,
            num_conditions: 1,
            num_timesteps: 1000,
            registers: 2,
            tapped_layers: vec![1, 3],
            disc_hidden: 64,
            causal_critic: false,
        }
    }
}

impl ModelConfig {
    pub fn num_blocks(&self) -> usize {
        self.frames / self.block_size
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.frame_dim == 0 || self.frames == 0 || self.width == 0 || self.layers == 0 {
            return err("frame_dim, frames, width and layers must be positive".into());
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return err(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.block_size == 0 || self.frames % self.block_size != 0 {
            return err(format!("{} frames not divisible into blocks of {}", self.frames, self.block_size));
        }
        if self.mlp_ratio == 0 || self.num_conditions == 0 || self.num_timesteps == 0 || self.disc_hidden == 0 {
            return err("mlp_ratio, num_conditions, num_timesteps and disc_hidden must be positive".into());
        }
        if self.registers == 0 || self.registers != self.tapped_layers.len() {
            return err(format!(
                "{} registers for {} tapped layers; one register per tapped layer",
                self.registers,
                self.tapped_layers.len()
            ));
        }
        if let Some(&l) = self.tapped_layers.iter().find(|&&l| l >= self.layers) {
            return err(format!("tapped layer {l} beyond {} layers", self.layers));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed construction order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub(crate) fn push(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn get(&self, i: usize) -> &Mat {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Overwrites values from `other`, which must have identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(contract("parameter stores differ in layout"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            b.expect_shape(a.shape())?;
            a.data.copy_from_slice(&b.data);
        }
        Ok(())
    }

    /// Places every tensor on `g`: as gradient-collecting leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { g.param(v.clone()) } else { g.constant(v.clone()) })
            .collect();
        Bound { graph_id: g.id(), vars }
    }
}

/// Parameters of one network placed on a specific graph.
#[derive(Clone, Debug)]
pub struct Bound {
    graph_id: u64,
    vars: Vec<Var>,
}

impl Bound {
    pub(crate) fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn check(&self, g: &Graph) -> Result<()> {
        if g.id() != self.graph_id {
            return Err(contract("parameters were bound to a different graph"));
        }
        Ok(())
    }

    /// One gradient per parameter, zeros where none arrived.
    pub fn grads(&self, grads: &Grads, store: &ParamStore) -> Vec<Mat> {
        self.vars
            .iter()
            .zip(store.values())
            .map(|(&v, m)| grads.get_or_zeros(v, m.shape()))
            .collect()
    }
}

pub fn grad_norm(grads: &[Mat]) -> f64 {
    grads.iter().map(Mat::sum_sq).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Clean,
    Noisy,
}

/// Placement of one token within the autoregressive layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenMeta {
    pub frame: usize,
    pub block: usize,
    pub kind: TokenKind,
}

/// Teacher-forced block-causal visibility: clean context from earlier blocks,
/// plus tokens of the same block and kind.
fn generator_visible(q: &TokenMeta, k: &TokenMeta) -> bool {
    (k.kind == TokenKind::Clean && k.block < q.block) || (k.block == q.block && k.kind == q.kind)
}

fn block_tokens(block: usize, block_size: usize, kind: TokenKind) -> Vec<TokenMeta> {
    (0..block_size).map(|i| TokenMeta { frame: block * block_size + i, block, kind }).collect()
}

#[derive(Clone, Debug)]
struct LayerIdx {
    g_attn: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    g_mlp: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Backbone {
    w_in: usize,
    b_in: usize,
    pos: usize,
    t_w: usize,
    t_b: usize,
    cond: usize,
    layers: Vec<LayerIdx>,
    g_final: usize,
    w_out: usize,
    b_out: usize,
}

struct BackboneOut {
    hidden: Var,
    kv: Vec<(Var, Var)>,
    layer_outputs: Vec<Var>,
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut StreamRng) -> Mat {
    Mat::randn(rows, cols, std, rng)
}

impl Backbone {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut StreamRng) -> Self {
        let (d, w) = (cfg.frame_dim, cfg.width);
        let hidden = w * cfg.mlp_ratio;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let w_in = store.push("embed.w_in", normal(d, w, inv(d), rng));
        let b_in = store.push("embed.b_in", Mat::zeros(1, w));
        let pos = store.push("embed.pos", normal(cfg.frames, w, 0.1, rng));
        let t_w = store.push("embed.t_w", normal(w, w, inv(w), rng));
        let t_b = store.push("embed.t_b", Mat::zeros(1, w));
        let cond = store.push("embed.cond", normal(cfg.num_conditions, w, 0.1, rng));
        let layers = (0..cfg.layers)
            .map(|l| LayerIdx {
                g_attn: store.push(format!("layer{l}.g_attn"), Mat::filled(1, w, 1.0)),
                wq: store.push(format!("layer{l}.wq"), normal(w, w, inv(w), rng)),
                wk: store.push(format!("layer{l}.wk"), normal(w, w, inv(w), rng)),
                wv: store.push(format!("layer{l}.wv"), normal(w, w, inv(w), rng)),
                wo: store.push(format!("layer{l}.wo"), normal(w, w, inv(w) * 0.5, rng)),
                g_mlp: store.push(format!("layer{l}.g_mlp"), Mat::filled(1, w, 1.0)),
                w1: store.push(format!("layer{l}.w1"), normal(w, hidden, inv(w), rng)),
                b1: store.push(format!("layer{l}.b1"), Mat::zeros(1, hidden)),
                w2: store.push(format!("layer{l}.w2"), normal(hidden, w, inv(hidden) * 0.5, rng)),
                b2: store.push(format!("layer{l}.b2"), Mat::zeros(1, w)),
            })
            .collect();
        let g_final = store.push("head.g_final", Mat::filled(1, w, 1.0));
        let w_out = store.push("head.w_out", Mat::zeros(w, d));
        let b_out = store.push("head.b_out", Mat::zeros(1, d));
        Self { w_in, b_in, pos, t_w, t_b, cond, layers, g_final, w_out, b_out }
    }

    /// Input embedding for `batch` samples of the token run `frames`, with one
    /// timestep per (sample, token) and one condition per sample.
    fn embed(
        &self,
        cfg: &ModelConfig,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        frames: &[usize],
        ts: &[u32],
        cond: &[usize],
    ) -> Result<Var> {
        let batch = cond.len();
        let tokens = frames.len();
        if g.shape(x) != (batch * tokens, cfg.frame_dim) || ts.len() != batch * tokens {
            return Err(Error::Shape(format!(
                "input {:?} with {} timesteps for {batch}x{tokens} tokens of dim {}",
                g.shape(x),
                ts.len(),
                cfg.frame_dim
            )));
        }
        if let Some(&c) = cond.iter().find(|&&c| c >= cfg.num_conditions) {
            return Err(contract(format!("condition {c} out of {} labels", cfg.num_conditions)));
        }
        if let Some(&t) = ts.iter().find(|&&t| t > cfg.num_timesteps) {
            return Err(Error::Domain(format!("timestep {t} beyond {}", cfg.num_timesteps)));
        }
        let h = g.affine(x, p.var(self.w_in), p.var(self.b_in))?;
        let pos_idx: Vec<usize> = (0..batch).flat_map(|_| frames.iter().copied()).collect();
        let pos = g.gather_rows(p.var(self.pos), &pos_idx)?;
        let h = g.add(h, pos)?;
        let feats = g.constant(timestep_features(ts, cfg.num_timesteps, cfg.width));
        let temb = g.affine(feats, p.var(self.t_w), p.var(self.t_b))?;
        let h = g.add(h, temb)?;
        let cond_idx: Vec<usize> = cond.iter().flat_map(|&c| std::iter::repeat_n(c, tokens)).collect();
        let cemb = g.gather_rows(p.var(self.cond), &cond_idx)?;
        g.add(h, cemb)
    }

    /// Runs every layer. `past` holds per-layer cached keys/values that are
    /// prepended to the current tokens' keys/values.
    fn layers(
        &self,
        cfg: &ModelConfig,
        g: &mut Graph,
        p: &Bound,
        mut h: Var,
        batch: usize,
        mask: &Rc<AttnMask>,
        past: Option<&[(Var, Var)]>,
    ) -> Result<BackboneOut> {
        let mut kv = Vec::with_capacity(self.layers.len());
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for (l, li) in self.layers.iter().enumerate() {
            let a = g.rms_norm(h);
            let a = g.mul_row(a, p.var(li.g_attn))?;
            let q = g.matmul(a, p.var(li.wq))?;
            let k = g.matmul(a, p.var(li.wk))?;
            let v = g.matmul(a, p.var(li.wv))?;
            let (keys, vals) = match past {
                Some(cache) => {
                    let (pk, pv) = cache[l];
                    (g.cat_tokens(pk, k, batch)?, g.cat_tokens(pv, v, batch)?)
                }
                None => (k, v),
            };
            let att = g.attention(q, keys, vals, batch, cfg.heads, mask.clone())?;
            let o = g.matmul(att, p.var(li.wo))?;
            h = g.add(h, o)?;
            let m = g.rms_norm(h);
            let m = g.mul_row(m, p.var(li.g_mlp))?;
            let m = g.affine(m, p.var(li.w1), p.var(li.b1))?;
            let m = g.gelu(m);
            let m = g.affine(m, p.var(li.w2), p.var(li.b2))?;
            h = g.add(h, m)?;
            kv.push((k, v));
            layer_outputs.push(h);
        }
        Ok(BackboneOut { hidden: h, kv, layer_outputs })
    }

    fn head(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        let h = g.rms_norm(h);
        let h = g.mul_row(h, p.var(self.g_final))?;
        g.affine(h, p.var(self.w_out), p.var(self.b_out))
    }
}

/// Sinusoidal features of `1000·t/T`, one row per timestep.
pub fn timestep_features(ts: &[u32], num_timesteps: u32, width: usize) -> Mat {
    let half = width / 2;
    let mut out = Mat::zeros(ts.len(), width);
    for (r, &t) in ts.iter().enumerate() {
        let s = 1000.0 * t as f64 / num_timesteps as f64;
        let row = out.row_mut(r);
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            row[i] = (s * freq).sin();
            row[half + i] = (s * freq).cos();
        }
    }
    out
}

/// Stored keys/values of completed blocks for one rollout.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    graph_id: Option<u64>,
    layers: Vec<(Var, Var)>,
    committed_blocks: usize,
    /// Block currently being denoised.
    current_block: usize,
    /// Whether the current block has been evaluated at least once.
    started: bool,
    /// Clean estimate of the previous block, committed on the next forward.
    pending: Option<Var>,
    nfe: usize,
}

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        *self = Self::default();
    }

    /// Frames whose keys/values are stored.
    pub fn len_frames(&self, block_size: usize) -> usize {
        self.committed_blocks * block_size
    }

    pub fn current_block(&self) -> usize {
        self.current_block
    }

    /// Generator evaluations performed since the cache was cleared.
    pub fn nfe(&self) -> usize {
        self.nfe
    }

    /// Records the finished clean estimate of the current block as context for the next one.
    pub fn push_clean(&mut self, g: &Graph, clean: Var) -> Result<()> {
        if !self.started {
            return Err(contract("push_clean before the block was evaluated"));
        }
        if self.graph_id != Some(g.id()) {
            return Err(contract("cache belongs to a different graph"));
        }
        self.pending = Some(clean);
        self.current_block += 1;
        self.started = false;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorNet {
    cfg: ModelConfig,
    params: ParamStore,
    bb: Backbone,
}

impl GeneratorNet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::default();
        let mut rng = substream(seed, "init-generator");
        let bb = Backbone::build(&cfg, &mut params, &mut rng);
        log::info!("generator parameters: {}", params.num_scalars());
        Ok(Self { cfg, params, bb })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Zeroes the output projection so every prediction is exactly zero.
    pub fn zero_head(&mut self) {
        for i in [self.bb.w_out, self.bb.b_out] {
            self.params.values[i].data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Full block-causal forward over an explicit token layout. `ts` holds one
    /// timestep per (sample, token); returns velocities for every token.
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        metas: &[TokenMeta],
        ts: &[u32],
        cond: &[usize],
    ) -> Result<Var> {
        p.check(g)?;
        let frames: Vec<usize> = metas.iter().map(|m| m.frame).collect();
        let h = self.bb.embed(&self.cfg, g, p, x, &frames, ts, cond)?;
        let mask = Rc::new(AttnMask::from_fn(metas.len(), metas.len(), |i, j| {
            generator_visible(&metas[i], &metas[j])
        })?);
        let out = self.bb.layers(&self.cfg, g, p, h, cond.len(), &mask, None)?;
        self.bb.head(g, p, out.hidden)
    }

    /// Teacher-forced pass: clean context for every block followed by the
    /// noisy sequence. `t` holds one timestep per sample, shared by its noisy
    /// tokens. Returns the velocity for the noisy tokens, `[B·F, d]`.
    pub fn forward_teacher(&self, g: &mut Graph, p: &Bound, clean: Var, noisy: Var, t: &[u32], cond: &[usize]) -> Result<Var> {
        let batch = cond.len();
        let f = self.cfg.frames;
        if t.len() != batch {
            return Err(Error::Shape(format!("{} timesteps for batch {batch}", t.len())));
        }
        let bs = self.cfg.block_size;
        let nb = self.cfg.num_blocks();
        let mut metas: Vec<TokenMeta> = (0..nb).flat_map(|b| block_tokens(b, bs, TokenKind::Clean)).collect();
        metas.extend((0..nb).flat_map(|b| block_tokens(b, bs, TokenKind::Noisy)));
        let ts: Vec<u32> = t
            .iter()
            .flat_map(|&tb| std::iter::repeat_n(0, f).chain(std::iter::repeat_n(tb, f)))
            .collect();
        let x = g.cat_tokens(clean, noisy, batch)?;
        let out = self.forward_tokens(g, p, x, &metas, &ts, cond)?;
        g.slice_tokens(out, batch, f, f)
    }

    /// Recomputes block `k` from scratch: clean context for blocks `< k`
    /// followed by the noisy block. Reference for the cached path.
    pub fn forward_reference(&self, g: &mut Graph, p: &Bound, context: Option<Var>, noisy: Var, k: usize, t: &[u32], cond: &[usize]) -> Result<Var> {
        let bs = self.cfg.block_size;
        let batch = cond.len();
        let mut metas: Vec<TokenMeta> = (0..k).flat_map(|b| block_tokens(b, bs, TokenKind::Clean)).collect();
        let n_ctx = metas.len();
        metas.extend(block_tokens(k, bs, TokenKind::Noisy));
        let x = match (context, k) {
            (None, 0) => noisy,
            (Some(c), k) if k > 0 => g.cat_tokens(c, noisy, batch)?,
            _ => return Err(contract("context must cover exactly the blocks before k")),
        };
        let ts: Vec<u32> = t
            .iter()
            .flat_map(|&tb| std::iter::repeat_n(0, n_ctx).chain(std::iter::repeat_n(tb, bs)))
            .collect();
        let out = self.forward_tokens(g, p, x, &metas, &ts, cond)?;
        g.slice_tokens(out, batch, n_ctx, bs)
    }

    /// Velocity for the current block of a cached rollout. Any pending clean
    /// block is processed alongside and committed to the cache.
    pub fn generator_forward(&self, g: &mut Graph, p: &Bound, cache: &mut KvCache, x_block: Var, t: &[u32], cond: &[usize]) -> Result<Var> {
        p.check(g)?;
        match cache.graph_id {
            None => cache.graph_id = Some(g.id()),
            Some(id) if id != g.id() => return Err(contract("cache belongs to a different graph")),
            _ => {}
        }
        let cfg = &self.cfg;
        let (bs, batch) = (cfg.block_size, cond.len());
        let k = cache.current_block;
        if k >= cfg.num_blocks() {
            return Err(contract(format!("block {k} past the end of a {}-block sequence", cfg.num_blocks())));
        }
        if t.len() != batch {
            return Err(Error::Shape(format!("{} timesteps for batch {batch}", t.len())));
        }
        let expected_committed = if cache.pending.is_some() { k - 1 } else { k };
        if cache.committed_blocks != expected_committed || (k > 0 && cache.pending.is_none() && !cache.started) {
            return Err(contract(format!(
                "cache holds {} blocks while denoising block {k}",
                cache.committed_blocks
            )));
        }

        let mut metas = Vec::new();
        let mut ts = Vec::new();
        let x = if let Some(clean) = cache.pending {
            metas.extend(block_tokens(k - 1, bs, TokenKind::Clean));
            metas.extend(block_tokens(k, bs, TokenKind::Noisy));
            for &tb in t {
                ts.extend(std::iter::repeat_n(0, bs));
                ts.extend(std::iter::repeat_n(tb, bs));
            }
            g.cat_tokens(clean, x_block, batch)?
        } else {
            metas.extend(block_tokens(k, bs, TokenKind::Noisy));
            for &tb in t {
                ts.extend(std::iter::repeat_n(tb, bs));
            }
            x_block
        };
        let n_past = cache.committed_blocks * bs;
        let past_metas: Vec<TokenMeta> =
            (0..cache.committed_blocks).flat_map(|b| block_tokens(b, bs, TokenKind::Clean)).collect();
        let mask = Rc::new(AttnMask::from_fn(metas.len(), n_past + metas.len(), |i, j| {
            let key = if j < n_past { &past_metas[j] } else { &metas[j - n_past] };
            generator_visible(&metas[i], key)
        })?);

        let frames: Vec<usize> = metas.iter().map(|m| m.frame).collect();
        let h = self.bb.embed(cfg, g, p, x, &frames, &ts, cond)?;
        let past = if n_past > 0 { Some(cache.layers.as_slice()) } else { None };
        let out = self.bb.layers(cfg, g, p, h, batch, &mask, past)?;
        let vel = self.bb.head(g, p, out.hidden)?;

        if cache.pending.take().is_some() {
            let mut layers = Vec::with_capacity(out.kv.len());
            for (l, &(kc, vc)) in out.kv.iter().enumerate() {
                let kc = g.slice_tokens(kc, batch, 0, bs)?;
                let vc = g.slice_tokens(vc, batch, 0, bs)?;
                layers.push(if n_past > 0 {
                    let (pk, pv) = cache.layers[l];
                    (g.cat_tokens(pk, kc, batch)?, g.cat_tokens(pv, vc, batch)?)
                } else {
                    (kc, vc)
                });
            }
            cache.layers = layers;
            cache.committed_blocks += 1;
        }
        cache.started = true;
        cache.nfe += 1;
        if metas.len() == bs {
            Ok(vel)
        } else {
            g.slice_tokens(vel, batch, bs, bs)
        }
    }

    /// One-step causal rollout from per-block noise `[B·F, d]`: every block is
    /// predicted at the highest timestep and fed back as context.
    pub fn rollout_one_step(&self, g: &mut Graph, p: &Bound, noise: Var, cond: &[usize], schedule: &NoiseSchedule) -> Result<Var> {
        let mut cache = KvCache::new();
        self.rollout_with_cache(g, p, &mut cache, noise, cond, schedule)
    }

    pub fn rollout_with_cache(&self, g: &mut Graph, p: &Bound, cache: &mut KvCache, noise: Var, cond: &[usize], schedule: &NoiseSchedule) -> Result<Var> {
        let batch = cond.len();
        let (bs, f) = (self.cfg.block_size, self.cfg.frames);
        if g.shape(noise) != (batch * f, self.cfg.frame_dim) {
            return Err(Error::Shape(format!("noise {:?} for batch {batch}", g.shape(noise))));
        }
        let t_max = schedule.num_timesteps();
        let sigma = schedule.sigma_at(t_max)?;
        let t = vec![t_max; batch];
        let mut out: Option<Var> = None;
        for k in 0..self.cfg.num_blocks() {
            let x = g.slice_tokens(noise, batch, k * bs, bs)?;
            let v = self.generator_forward(g, p, cache, x, &t, cond)?;
            let sv = g.scale(v, sigma);
            let x0 = g.sub(x, sv)?;
            cache.push_clean(g, x0)?;
            out = Some(match out {
                None => x0,
                Some(prev) => g.cat_tokens(prev, x0, batch)?,
            });
        }
        Ok(out.expect("at least one block"))
    }
}

#[derive(Clone, Debug)]
struct TapIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

/// Joint velocity prediction `[B·F, d]` and real/fake logit `[B, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct CriticOutput {
    pub velocity: Var,
    pub logit: Var,
}

#[derive(Clone, Debug)]
pub struct CriticNet {
    cfg: ModelConfig,
    params: ParamStore,
    bb: Backbone,
    registers: usize,
    taps: Vec<TapIdx>,
    d_w1: usize,
    d_b1: usize,
    d_w2: usize,
    d_b2: usize,
}

impl CriticNet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::default();
        let mut rng = substream(seed, "init-critic");
        let bb = Backbone::build(&cfg, &mut params, &mut rng);
        let w = cfg.width;
        let inv = 1.0 / (w as f64).sqrt();
        let registers = params.push("disc.registers", normal(cfg.registers, w, 1.0, &mut rng));
        let taps = (0..cfg.tapped_layers.len())
            .map(|i| TapIdx {
                wq: params.push(format!("disc.tap{i}.wq"), normal(w, w, inv, &mut rng)),
                wk: params.push(format!("disc.tap{i}.wk"), normal(w, w, inv, &mut rng)),
                wv: params.push(format!("disc.tap{i}.wv"), normal(w, w, inv, &mut rng)),
                wo: params.push(format!("disc.tap{i}.wo"), normal(w, w, inv, &mut rng)),
            })
            .collect();
        let feat = w * cfg.tapped_layers.len();
        let d_w1 = params.push("disc.w1", normal(feat, cfg.disc_hidden, 1.0 / (feat as f64).sqrt(), &mut rng));
        let d_b1 = params.push("disc.b1", Mat::zeros(1, cfg.disc_hidden));
        let d_w2 = params.push("disc.w2", normal(cfg.disc_hidden, 1, 1.0 / (cfg.disc_hidden as f64).sqrt(), &mut rng));
        let d_b2 = params.push("disc.b2", Mat::zeros(1, 1));
        log::info!("critic parameters: {}", params.num_scalars());
        Ok(Self { cfg, params, bb, registers, taps, d_w1, d_b1, d_w2, d_b2 })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    pub fn zero_velocity_head(&mut self) {
        for i in [self.bb.w_out, self.bb.b_out] {
            self.params.values[i].data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn zero_logit_head(&mut self) {
        for i in [self.d_w2, self.d_b2] {
            self.params.values[i].data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn registers_index(&self) -> usize {
        self.registers
    }

    /// Both heads from one backbone pass over the noised sequences `x_t`
    /// (`[B·F, d]`), with one timestep and condition per sample.
    pub fn critic_forward(&self, g: &mut Graph, p: &Bound, x_t: Var, t: &[u32], cond: &[usize]) -> Result<CriticOutput> {
        p.check(g)?;
        let cfg = &self.cfg;
        let (f, batch) = (cfg.frames, cond.len());
        if t.len() != batch {
            return Err(Error::Shape(format!("{} timesteps for batch {batch}", t.len())));
        }
        let frames: Vec<usize> = (0..f).collect();
        let ts: Vec<u32> = t.iter().flat_map(|&tb| std::iter::repeat_n(tb, f)).collect();
        let h = self.bb.embed(cfg, g, p, x_t, &frames, &ts, cond)?;
        let bs = cfg.block_size;
        let mask = if cfg.causal_critic {
            AttnMask::from_fn(f, f, |i, j| j / bs <= i / bs)?
        } else {
            AttnMask::full(f, f)
        };
        let out = self.bb.layers(cfg, g, p, h, batch, &Rc::new(mask), None)?;
        let velocity = self.bb.head(g, p, out.hidden)?;

        let regs = g.l2_normalize_rows(p.var(self.registers));
        let pool = Rc::new(AttnMask::full(1, f));
        let mut feats: Option<Var> = None;
        for (i, (&layer, tap)) in cfg.tapped_layers.iter().zip(&self.taps).enumerate() {
            let tokens = g.rms_norm(out.layer_outputs[layer]);
            let reg = g.slice_tokens(regs, 1, i, 1)?;
            let q = g.matmul(reg, p.var(tap.wq))?;
            let q = g.broadcast_rows(q, batch)?;
            let k = g.matmul(tokens, p.var(tap.wk))?;
            let v = g.matmul(tokens, p.var(tap.wv))?;
            let a = g.attention(q, k, v, batch, cfg.heads, pool.clone())?;
            let a = g.matmul(a, p.var(tap.wo))?;
            feats = Some(match feats {
                None => a,
                Some(prev) => g.cat_cols(prev, a)?,
            });
        }
        let feats = feats.expect("at least one tapped layer");
        let hdn = g.affine(feats, p.var(self.d_w1), p.var(self.d_b1))?;
        let hdn = g.gelu(hdn);
        let logit = g.affine(hdn, p.var(self.d_w2), p.var(self.d_b2))?;
        Ok(CriticOutput { velocity, logit })
    }
}

const CHECKPOINT_FORMAT: &str = "ardistill-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    kind: String,
    model: ModelConfig,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A parameter snapshot with the configuration needed to rebuild its network.
///
/// On disk: one UTF-8 JSON header line (format tag, network kind, model
/// config, free-form metadata, and the ordered tensor names and shapes),
/// then every tensor's values in row-major order as little-endian `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub model: ModelConfig,
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            kind: self.kind.clone(),
            model: self.model.clone(),
            meta: self.meta.clone(),
            tensors: self
                .params
                .names
                .iter()
                .zip(&self.params.values)
                .map(|(n, v)| TensorEntry { name: n.clone(), rows: v.rows, cols: v.cols })
                .collect(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.params.num_scalars() * 4);
        for v in &self.params.values {
            for &x in &v.data {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("unsupported checkpoint format `{}`", header.format)));
        }
        let mut params = ParamStore::default();
        for e in &header.tensors {
            let mut bytes = vec![0u8; e.rows * e.cols * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Parse(format!("checkpoint truncated in tensor `{}`", e.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.push(e.name.clone(), Mat { rows: e.rows, cols: e.cols, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Parse("trailing bytes after checkpoint tensors".into()));
        }
        Ok(Self { kind: header.kind, model: header.model, meta: header.meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }

    pub fn from_generator(net: &GeneratorNet, meta: serde_json::Value) -> Self {
        Self { kind: "generator".into(), model: net.cfg.clone(), meta, params: net.params.clone() }
    }

    pub fn from_critic(net: &CriticNet, meta: serde_json::Value) -> Self {
        Self { kind: "critic".into(), model: net.cfg.clone(), meta, params: net.params.clone() }
    }

    pub fn into_generator(self) -> Result<GeneratorNet> {
        if self.kind != "generator" {
            return Err(contract(format!("checkpoint holds a {}, not a generator", self.kind)));
        }
        let mut net = GeneratorNet::new(self.model, 0)?;
        net.params.copy_from(&self.params)?;
        Ok(net)
    }

    pub fn into_critic(self) -> Result<CriticNet> {
        if self.kind != "critic" {
            return Err(contract(format!("checkpoint holds a {}, not a critic", self.kind)));
        }
        let mut net = CriticNet::new(self.model, 0)?;
        net.params.copy_from(&self.params)?;
        Ok(net)
    }
}
