#![allow(dead_code)]

use ardistill::autograd::{Graph, Var};
use ardistill::model::{Bound, CriticNet, GeneratorNet, ModelConfig, ParamStore};
use ardistill::rng::{normal_mat, substream};
use ardistill::Mat;

pub fn small_model(frames: usize, block_size: usize) -> ModelConfig {
    ModelConfig {
        frame_dim: 2,
        frames,
        width: 8,
        layers: 2,
        heads: 2,
        block_size,
        registers: 2,
        tapped_layers: vec![0, 1],
        disc_hidden: 8,
        num_conditions: 2,
        ..ModelConfig::default()
    }
}

/// Adds N(0, std²) noise to every parameter so no head or bias is trivially zero.
pub fn jitter(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = substream(seed, "jitter");
    for m in store.values_mut() {
        let n = normal_mat(m.rows, m.cols, &mut rng);
        for (v, e) in m.data.iter_mut().zip(&n.data) {
            *v += std * e;
        }
    }
}

pub struct Nets {
    pub gen: GeneratorNet,
    pub critic: CriticNet,
}

impl Nets {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut gen = GeneratorNet::new(cfg.clone(), seed).unwrap();
        let mut critic = CriticNet::new(cfg, seed + 1).unwrap();
        jitter(gen.params_mut(), 0.3, seed + 2);
        jitter(critic.params_mut(), 0.3, seed + 3);
        Self { gen, critic }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Generator,
    Critic,
}

/// Worst relative error between autodiff and central differences, and the
/// number of scalars compared.
#[derive(Debug, Default)]
pub struct GradReport {
    pub worst: f64,
    pub checked: usize,
    pub nonzero: usize,
}

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

/// Compares the gradient of `build` with respect to one network's parameters
/// against central differences. At most `per_tensor` entries per tensor are
/// perturbed, spread evenly across it.
pub fn check_params(
    nets: &Nets,
    side: Side,
    per_tensor: usize,
    build: impl Fn(&mut Graph, &Nets, &Bound, &Bound) -> Var,
) -> GradReport {
    let eval = |nets: &Nets, train: bool| {
        let mut g = Graph::new();
        let gp = nets.gen.bind(&mut g, train && side == Side::Generator);
        let cp = nets.critic.bind(&mut g, train && side == Side::Critic);
        let loss = build(&mut g, nets, &gp, &cp);
        (g, gp, cp, loss)
    };
    let (g, gp, cp, loss) = eval(nets, true);
    let grads = g.backward(loss).unwrap();
    let analytic = match side {
        Side::Generator => gp.grads(&grads, nets.gen.params()),
        Side::Critic => cp.grads(&grads, nets.critic.params()),
    };
    let h = 1e-5;
    let mut report = GradReport::default();
    for (ti, an) in analytic.iter().enumerate() {
        let n = an.len();
        let step = (n / per_tensor.max(1)).max(1);
        for e in (0..n).step_by(step).take(per_tensor) {
            let value_at = |delta: f64| {
                let mut p = Nets { gen: nets.gen.clone(), critic: nets.critic.clone() };
                let store = match side {
                    Side::Generator => p.gen.params_mut(),
                    Side::Critic => p.critic.params_mut(),
                };
                store.get_mut(ti).data[e] += delta;
                let (g, _, _, loss) = eval(&p, false);
                g.scalar_value(loss)
            };
            let fd = (value_at(h) - value_at(-h)) / (2.0 * h);
            let a = an.data[e];
            report.worst = report.worst.max(rel_err(fd, a));
            report.checked += 1;
            report.nonzero += usize::from(a.abs() > 1e-9);
        }
    }
    report
}

/// Compares the gradient of `build` with respect to its input matrix against
/// central differences with step `h`; returns the worst relative error.
pub fn check_input(x: &Mat, h: f64, build: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = build(&mut g, xv);
    let grads = g.backward(loss).unwrap();
    let an = grads.get_or_zeros(xv, x.shape());
    let mut worst: f64 = 0.0;
    for e in 0..x.len() {
        let value_at = |delta: f64| {
            let mut m = x.clone();
            m.data[e] += delta;
            let mut g = Graph::new();
            let v = g.constant(m);
            let l = build(&mut g, v);
            g.scalar_value(l)
        };
        let fd = (value_at(h) - value_at(-h)) / (2.0 * h);
        worst = worst.max(rel_err(fd, an.data[e]));
    }
    worst
}

pub mod cases {
    use super::*;
    use ardistill::objectives::{
        adv_discriminator_loss, adv_generator_loss, fake_score_loss, forward_kl_surrogate,
        CriticScore,
    };
    use ardistill::schedule::NoiseSchedule;

    const T: [u32; 2] = [300, 850];
    const COND: [usize; 2] = [0, 1];

    fn corrupt(g: &mut Graph, x: Var, eps: &Mat, s: &NoiseSchedule) -> Var {
        let sig = s.sigmas(&T).unwrap();
        let keep: Vec<f64> = sig.iter().map(|v| 1.0 - v).collect();
        let a = g.scale_groups(x, &keep).unwrap();
        let e = g.constant(eps.clone());
        let e = g.scale_groups(e, &sig).unwrap();
        g.add(a, e).unwrap()
    }

    /// Every network loss on width 8, 2 layers, two blocks of two frames.
    pub fn run(per_tensor: usize) -> Vec<(&'static str, GradReport)> {
        let nets = Nets::new(small_model(4, 2), 21);
        let s = NoiseSchedule::default();
        let mut rng = substream(22, "grad-inputs");
        let noise = normal_mat(8, 2, &mut rng);
        let eps = normal_mat(8, 2, &mut rng);
        let delta = normal_mat(8, 2, &mut rng);
        let real = normal_mat(8, 2, &mut rng);
        let mut out = Vec::new();

        out.push((
            "generator cached rollout -> squared error",
            check_params(&nets, Side::Generator, per_tensor, |g, n, gp, _| {
                let z = g.constant(noise.clone());
                let x = n.gen.rollout_one_step(g, gp, z, &COND, &s).unwrap();
                let target = g.constant(delta.clone());
                g.mse(x, target).unwrap()
            }),
        ));
        let adv_gen = |g: &mut Graph, n: &Nets, gp: &Bound, cp: &Bound| {
            let z = g.constant(noise.clone());
            let x = n.gen.rollout_one_step(g, gp, z, &COND, &s).unwrap();
            let xt = corrupt(g, x, &eps, &s);
            let l = n.critic.critic_forward(g, cp, xt, &T, &COND).unwrap().logit;
            adv_generator_loss(g, l)
        };
        out.push(("generator rollout -> critic logit -> L_G_adv", check_params(&nets, Side::Generator, per_tensor, adv_gen)));
        out.push(("critic logit <- L_G_adv", check_params(&nets, Side::Critic, per_tensor, adv_gen)));
        out.push((
            "critic velocity -> L_fake",
            check_params(&nets, Side::Critic, per_tensor, |g, n, _, cp| {
                let score = CriticScore { net: &n.critic, params: cp };
                fake_score_loss(g, &score, &real, &T, &eps, &COND, &s).unwrap()
            }),
        ));
        out.push((
            "critic logits -> L_D_adv",
            check_params(&nets, Side::Critic, per_tensor, |g, n, _, cp| {
                let xr = g.constant(real.clone());
                let xr = corrupt(g, xr, &eps, &s);
                let xf = g.constant(noise.clone());
                let xf = corrupt(g, xf, &delta, &s);
                let lr = n.critic.critic_forward(g, cp, xr, &T, &COND).unwrap().logit;
                let lf = n.critic.critic_forward(g, cp, xf, &T, &COND).unwrap().logit;
                adv_discriminator_loss(g, lr, lf).unwrap()
            }),
        ));
        out.push((
            "generator teacher-forced -> forward-KL surrogate",
            check_params(&nets, Side::Generator, per_tensor, |g, n, gp, _| {
                forward_kl_surrogate(g, &n.gen, gp, &noise, &[1000, 750], &real, &COND, &s).unwrap()
            }),
        ));
        let x = s.corrupt_rows(&real, &eps, &T).unwrap();
        let worst = check_input(&x, 1e-4, |g, xv| {
            let cp = nets.critic.bind(g, false);
            let l = nets.critic.critic_forward(g, &cp, xv, &T, &COND).unwrap().logit;
            g.sum(l)
        });
        out.push(("critic logit w.r.t. its input", GradReport { worst, checked: x.len(), nonzero: x.len() }));
        out
    }
}
