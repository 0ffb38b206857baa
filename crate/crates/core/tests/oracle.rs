//! Monte Carlo checks that the closed-form velocity is the conditional mean
//! of the regression target `ε − x0` given the noised sample.

use ardistill::rng::{normal_mat, substream};
use ardistill::schedule::NoiseSchedule;
use ardistill::synthworld::{GaussianWorld, WorldConfig};

/// Residuals `(ε − x0) − v*(x_t)` must be uncorrelated with `v*(x_t)` and
/// with every coordinate of `x_t`, and the oracle must beat scaled versions
/// of itself on the denoising loss.
fn check(world: &GaussianWorld, t: u32, seed: u64) {
    let s = NoiseSchedule::default();
    let n = 20_000;
    let mut rng = substream(seed, "oracle-mc");
    let (x0, cond) = world.sample_batch(n, &mut rng);
    let eps = normal_mat(n, x0.cols, &mut rng);
    let ts = vec![t; n];
    let xt = s.corrupt_rows(&x0, &eps, &ts).unwrap();
    let v = world.velocity_batch(&xt, &ts, &cond, &s).unwrap();
    let d = x0.cols;
    let mut corr_v = 0.0;
    let mut corr_x = vec![0.0; d];
    let mut loss = [0.0; 3];
    let (mut scale_v, mut scale_r) = (0.0, 0.0);
    for r in 0..n {
        for c in 0..d {
            let target = eps.get(r, c) - x0.get(r, c);
            let res = target - v.get(r, c);
            corr_v += res * v.get(r, c);
            corr_x[c] += res * xt.get(r, c);
            scale_v += v.get(r, c).powi(2);
            scale_r += res * res;
            for (k, f) in [1.0, 0.9, 1.1].iter().enumerate() {
                loss[k] += (target - f * v.get(r, c)).powi(2);
            }
        }
    }
    let tol = 5.0 * (scale_v * scale_r).sqrt() / n as f64 * (n as f64).sqrt();
    assert!(corr_v.abs() < tol, "t={t}: residual·v = {corr_v}, tol {tol}");
    for (c, cx) in corr_x.iter().enumerate() {
        assert!(cx.abs() < 5.0 * tol, "t={t} coord {c}: residual·x = {cx}");
    }
    assert!(loss[0] < loss[1] && loss[0] < loss[2], "{loss:?}");
}

#[test]
fn unimodal_oracle_is_the_conditional_mean() {
    let w = GaussianWorld::new(WorldConfig::gauss_ssm(2, 3)).unwrap();
    for (i, t) in [100, 500, 900].into_iter().enumerate() {
        check(&w, t, i as u64);
    }
}

#[test]
fn bimodal_oracle_is_the_conditional_mean() {
    let w = GaussianWorld::new(WorldConfig::bimodal_ssm(2, 3)).unwrap();
    for (i, t) in [100, 500, 900].into_iter().enumerate() {
        check(&w, t, 10 + i as u64);
    }
}
