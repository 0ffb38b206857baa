//! `ardistill`: train, sample, analyze and ablate one-step autoregressive generators.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use ardistill::config::ExperimentConfig;
use ardistill::curvature::{
    curvature_profile, curvature_stats, high_noise_mass, normalize_profile, temporal_difference_profile,
    StatsOptions, DEFAULT_THRESHOLD,
};
use ardistill::eval::{motion_proxy, sliced_wasserstein};
use ardistill::experiment::{ablate, eval_world_samples, AblationKind};
use ardistill::io::{sequences_from_csv, sequences_to_csv, trajectories_from_csv, write_atomic};
use ardistill::model::Checkpoint;
use ardistill::rng::{substream, WORLD};
use ardistill::sampler::sample_ffe;
use ardistill::trainer::run_with;

#[derive(Parser, Debug)]
#[command(name = "ardistill", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-fit, then alternate critic and generator updates; writes trainlog.csv and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Root seed; defaults to run.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to paths.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the large-model learning rates.
        #[arg(long)]
        paper_hparams: bool,
    },
    /// Draws sequences from a generator checkpoint into a sequence CSV.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to sample.num_samples.
        #[arg(long)]
        num: Option<usize>,
        /// Defaults to sample.first_block_steps.
        #[arg(long)]
        first_block_steps: Option<usize>,
        /// Defaults to `<out_dir>/samples.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Curvature statistics of a trajectory CSV, written as JSON.
    Curvature {
        #[arg(long = "in")]
        input: PathBuf,
        /// Defaults to `<input>.curvature.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Analyze frame differences; needs --frames.
        #[arg(long)]
        temporal: bool,
        /// Frames per state row.
        #[arg(long)]
        frames: Option<usize>,
        /// Weight each interval by its width.
        #[arg(long)]
        dt_weighted: bool,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 10_000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sliced Wasserstein distance and motion of a sequence CSV against fresh world samples.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `<out_dir>/eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired runs over run.seeds that differ in one setting; writes a JSON report.
    Ablate {
        which: Which,
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<out_dir>/ablate_<which>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    Fkl,
    DiscTarget,
    All,
}

impl Which {
    fn kinds(self) -> Vec<AblationKind> {
        match self {
            Which::Fkl => vec![AblationKind::Fkl],
            Which::DiscTarget => vec![AblationKind::DiscTarget],
            Which::All => vec![AblationKind::Fkl, AblationKind::DiscTarget],
        }
    }

    fn name(self) -> &'static str {
        match self {
            Which::Fkl => "fkl",
            Which::DiscTarget => "disc-target",
            Which::All => "all",
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("config {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

const CHECKPOINT_NAMES: [&str; 3] = ["generator.ckpt", "generator_ema.ckpt", "critic.ckpt"];

fn save_checkpoints(dir: &Path, ckpts: &[Checkpoint; 3]) -> ardistill::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (ckpt, name) in ckpts.iter().zip(CHECKPOINT_NAMES) {
        ckpt.save(&dir.join(name))?;
    }
    Ok(())
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>, paper_hparams: bool) -> Result<()> {
    let mut cfg = load_config(config)?;
    if paper_hparams {
        cfg.apply_paper_hparams();
    }
    let seed = seed.unwrap_or(cfg.seed);
    let out = out.unwrap_or_else(|| cfg.out_dir.clone());
    let world = cfg.world.build()?;
    let meta = |iteration: usize| json!({ "seed": seed, "iteration": iteration, "world": cfg.world });
    let outcome = run_with(&cfg.train, &cfg.model, &world, seed, |iter, tr| {
        save_checkpoints(&out.join(format!("checkpoints/iter_{iter:06}")), &tr.checkpoints(meta(iter))?)
    })?;
    let iters = cfg.train.iterations;
    let finals = [
        Checkpoint::from_generator(&outcome.generator, meta(iters)),
        Checkpoint::from_generator(&outcome.generator_ema, meta(iters)),
        Checkpoint::from_critic(&outcome.critic, meta(iters)),
    ];
    save_checkpoints(&out, &finals).with_context(|| format!("writing checkpoints to {}", out.display()))?;
    write_file(&out.join("trainlog.csv"), outcome.log.to_csv().as_bytes())?;
    if let Some(last) = outcome.log.rows.last() {
        println!("{iters} iterations, final L_fake {:.5}, gap {:.4}", last.l_fake, last.gap);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn sample(
    config: &Path,
    checkpoint: &Path,
    seed: Option<u64>,
    num: Option<usize>,
    first_block_steps: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(n) = first_block_steps {
        ensure!(n > 0, "--first-block-steps must be positive");
        cfg.sample.first_block_steps = n;
    }
    let seed = seed.unwrap_or(cfg.seed);
    let num = num.unwrap_or(cfg.sample.num_samples);
    ensure!(num > 0, "--num must be positive");
    let world = cfg.world.build()?;
    let net = Checkpoint::load(checkpoint)
        .and_then(Checkpoint::into_generator)
        .with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let mc = net.config();
    if (mc.frames, mc.frame_dim) != (cfg.model.frames, cfg.model.frame_dim) {
        bail!(
            "checkpoint has {} frames of dimension {}, config expects {} of {}",
            mc.frames,
            mc.frame_dim,
            cfg.model.frames,
            cfg.model.frame_dim
        );
    }
    let sched = cfg.train.schedule()?;
    let conds = world.sample_conds(num, &mut substream(seed, WORLD));
    let s = sample_ffe(&net, &conds, &cfg.sample_config(), seed, &sched)?;
    let seqs = s.sequences.reshaped(num, mc.frames * mc.frame_dim)?;
    let out = out.unwrap_or_else(|| cfg.out_dir.join("samples.csv"));
    write_file(&out, sequences_to_csv(&seqs, mc.frames)?.as_bytes())?;
    println!("{num} sequences, {} network evaluations per batch, wrote {}", s.nfe, out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn curvature(
    input: &Path,
    out: Option<PathBuf>,
    temporal: bool,
    frames: Option<usize>,
    dt_weighted: bool,
    threshold: f64,
    bootstrap: usize,
    seed: u64,
) -> Result<()> {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let probe = trajectories_from_csv(&text, None).with_context(|| format!("parsing {}", input.display()))?;
    let shape = match frames {
        Some(f) => {
            let coords = probe[0].coords();
            ensure!(f > 0 && coords % f == 0, "{coords} coordinates do not split into {f} frames");
            Some((f, coords / f))
        }
        None if temporal => bail!("--temporal needs --frames"),
        None => None,
    };
    let trajs = trajectories_from_csv(&text, shape)?;
    let profiles = trajs
        .iter()
        .map(|t| if temporal { temporal_difference_profile(t) } else { curvature_profile(t) })
        .collect::<ardistill::Result<Vec<_>>>()?;
    let opts = StatsOptions { threshold, bootstrap_n: bootstrap, seed, dt_weighted };
    let stats = curvature_stats(&profiles, &opts)?;
    let per_trajectory: Vec<_> = profiles
        .iter()
        .map(|p| {
            let n = normalize_profile(p);
            json!({
                "high_noise_mass": high_noise_mass(p, threshold, dt_weighted),
                "all_zero": n.all_zero,
                "times": p.times,
                "curvature": p.values,
                "normalized": n.normalized,
            })
        })
        .collect();
    let report = json!({
        "input": input.file_name().map(|n| n.to_string_lossy().into_owned()),
        "temporal": temporal,
        "dt_weighted": dt_weighted,
        "high_noise_mass": stats.high_noise_mass_mean,
        "stats": stats,
        "trajectories": per_trajectory,
    });
    let out = out.unwrap_or_else(|| {
        let mut name = input.as_os_str().to_owned();
        name.push(".curvature.json");
        PathBuf::from(name)
    });
    write_json(&out, &report)?;
    println!(
        "{} trajectories, high-noise mass {:.4} [{:.4}, {:.4}], wrote {}",
        stats.n_trajectories,
        stats.high_noise_mass_mean,
        stats.ci95_lo,
        stats.ci95_hi,
        out.display()
    );
    Ok(())
}

fn eval(config: &Path, samples: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let text = std::fs::read_to_string(samples).with_context(|| format!("reading {}", samples.display()))?;
    let (seqs, frames) = sequences_from_csv(&text).with_context(|| format!("parsing {}", samples.display()))?;
    let world = cfg.world.build()?;
    let (real, _) = eval_world_samples(&world, cfg.eval.world_samples, seed);
    ensure!(
        seqs.cols == real.cols && frames == cfg.model.frames,
        "samples have {frames} frames and {} coordinates, the world has {} frames and {}",
        seqs.cols,
        cfg.model.frames,
        real.cols
    );
    let sw = sliced_wasserstein(&seqs, &real, cfg.eval.projections, seed)?;
    let motion = motion_proxy(&seqs, frames)?;
    let world_motion = motion_proxy(&real, frames)?;
    let out = out.unwrap_or_else(|| cfg.out_dir.join("eval.json"));
    write_json(
        &out,
        &json!({
            "sliced_wasserstein": sw,
            "motion_proxy": motion,
            "world_motion_proxy": world_motion,
            "num_samples": seqs.rows,
            "num_world_samples": real.rows,
            "projections": cfg.eval.projections,
            "seed": seed,
        }),
    )?;
    println!("sliced_wasserstein {sw:.5}, motion {motion:.5} (world {world_motion:.5}), wrote {}", out.display());
    Ok(())
}

fn ablation(which: Which, config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let mut reports = serde_json::Map::new();
    for kind in which.kinds() {
        let report = ablate(&cfg, kind)?;
        print!("{}", report.summary_table());
        reports.insert(kind.name().into(), serde_json::to_value(&report)?);
    }
    let out = out.unwrap_or_else(|| cfg.out_dir.join(format!("ablate_{}.json", which.name())));
    write_json(&out, &serde_json::Value::Object(reports))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out, paper_hparams } => train(&config, seed, out, paper_hparams),
        Command::Sample { config, checkpoint, seed, num, first_block_steps, out } => {
            sample(&config, &checkpoint, seed, num, first_block_steps, out)
        }
        Command::Curvature { input, out, temporal, frames, dt_weighted, threshold, bootstrap, seed } => {
            curvature(&input, out, temporal, frames, dt_weighted, threshold, bootstrap, seed)
        }
        Command::Eval { config, samples, seed, out } => eval(&config, &samples, seed, out),
        Command::Ablate { which, config, out } => ablation(which, &config, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
