//! Multi-step first-block denoising against single-step prediction for a
//! partially trained denoiser, scored against the oracle flow endpoint.

use ardistill::autograd::Graph;
use ardistill::model::{GeneratorNet, KvCache, ModelConfig};
use ardistill::objectives::denoising_loss;
use ardistill::optim::{AdamConfig, AdamW};
use ardistill::rng::{indexed_substream, normal_mat, substream};
use ardistill::sampler::{initial_noise, sample_ffe, SampleConfig};
use ardistill::schedule::NoiseSchedule;
use ardistill::synthworld::{uniform_grid, GaussianWorld, WorldConfig};
use rand::Rng;

const FRAMES: usize = 2;
const DIM: usize = 2;

/// Single-block generator trained for `steps` denoising updates.
fn partially_trained(world: &GaussianWorld, s: &NoiseSchedule, seed: u64, steps: usize) -> GeneratorNet {
    let cfg = ModelConfig {
        frame_dim: DIM,
        frames: FRAMES,
        width: 16,
        layers: 2,
        heads: 2,
        block_size: FRAMES,
        registers: 1,
        tapped_layers: vec![1],
        ..ModelConfig::default()
    };
    let mut net = GeneratorNet::new(cfg, seed).unwrap();
    let adam = AdamConfig { lr: 3e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
    let mut opt = AdamW::new(adam, net.params()).unwrap();
    let mut rng = substream(seed, "denoise-train");
    let batch = 32;
    for _ in 0..steps {
        let (x0, cond) = world.sample_batch(batch, &mut rng);
        let x0 = x0.reshaped(batch * FRAMES, DIM).unwrap();
        let eps = normal_mat(batch * FRAMES, DIM, &mut rng);
        let t: Vec<u32> = (0..batch).map(|_| rng.random_range(1..=1000)).collect();
        let xt = s.corrupt_rows(&x0, &eps, &t).unwrap();
        let mut g = Graph::new();
        let p = net.bind(&mut g, true);
        let xv = g.constant(xt);
        let v = net.generator_forward(&mut g, &p, &mut KvCache::new(), xv, &t, &cond).unwrap();
        let loss = denoising_loss(&mut g, v, &x0, &eps).unwrap();
        let grads = p.grads(&g.backward(loss).unwrap(), net.params());
        opt.step(net.params_mut(), &grads).unwrap();
    }
    net
}

/// Mean distance of sampled sequences from the oracle flow endpoints of the same noise.
fn endpoint_error(net: &GeneratorNet, world: &GaussianWorld, s: &NoiseSchedule, steps: usize, seed: u64, n: usize) -> f64 {
    let cond = vec![0; n];
    let cfg = SampleConfig::with_steps(steps, 1, 1000);
    let out = sample_ffe(net, &cond, &cfg, seed, s).unwrap().sequences.reshaped(n, FRAMES * DIM).unwrap();
    let noise = initial_noise(net, n, seed).reshaped(n, FRAMES * DIM).unwrap();
    let grid = uniform_grid(400);
    (0..n)
        .map(|r| {
            let rec = world.integrate_flow(s, &grid, noise.row(r), 0).unwrap();
            let d: f64 = rec.endpoint().iter().zip(out.row(r)).map(|(a, b)| (a - b).powi(2)).sum();
            d.sqrt()
        })
        .sum::<f64>()
        / n as f64
}

#[test]
fn four_steps_beat_one_step_on_most_seeds() {
    let world = GaussianWorld::new(WorldConfig::gauss_ssm(DIM, FRAMES)).unwrap();
    let s = NoiseSchedule::default();
    let seeds = 10;
    let mut wins = 0;
    let mut report = Vec::new();
    for seed in 0..seeds {
        let net = partially_trained(&world, &s, seed, 300);
        let eval_seed = indexed_substream(seed, "eval", 0).random::<u64>();
        let one = endpoint_error(&net, &world, &s, 1, eval_seed, 64);
        let four = endpoint_error(&net, &world, &s, 4, eval_seed, 64);
        wins += usize::from(four <= one);
        report.push((one, four));
    }
    assert!(wins * 10 >= seeds as usize * 8, "{wins}/{seeds}: {report:?}");
}
