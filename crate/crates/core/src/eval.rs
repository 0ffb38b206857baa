//! Sample-quality metrics: sliced Wasserstein distance, a frame-motion proxy,
//! and discriminator logit-gap statistics.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Error, Result};
use crate::rng::{substream, PROJECTIONS};
use crate::tensor::Mat;
use crate::trainer::TrainLog;

/// Wasserstein-1 distance between two 1-D empirical distributions.
/// Both inputs must be sorted ascending.
pub fn wasserstein_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / na as f64;
    }
    // Integrate |F_a^{-1}(u) − F_b^{-1}(u)| over the merged quantile breakpoints.
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        // compare (i+1)/na with (j+1)/nb exactly
        let (ka, kb) = ((i + 1) * nb, (j + 1) * na);
        let next = ka.min(kb) as f64 / (na * nb) as f64;
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if ka <= kb {
            i += 1;
        }
        if kb <= ka {
            j += 1;
        }
    }
    total
}

/// Mean 1-D Wasserstein-1 distance over `n_projections` random unit directions.
/// Rows of `a` and `b` are flattened sequences.
pub fn sliced_wasserstein(a: &Mat, b: &Mat, n_projections: usize, seed: u64) -> Result<f64> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!("dimension {} vs {}", a.cols, b.cols)));
    }
    if a.rows == 0 || b.rows == 0 || n_projections == 0 {
        return Err(contract("sliced Wasserstein needs non-empty sets and at least one projection"));
    }
    let d = a.cols;
    let mut rng = substream(seed, PROJECTIONS);
    let mut total = 0.0;
    let mut pa = vec![0.0; a.rows];
    let mut pb = vec![0.0; b.rows];
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x /= norm);
        for (r, p) in pa.iter_mut().enumerate() {
            *p = a.row(r).iter().zip(&dir).map(|(x, u)| x * u).sum();
        }
        for (r, p) in pb.iter_mut().enumerate() {
            *p = b.row(r).iter().zip(&dir).map(|(x, u)| x * u).sum();
        }
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        total += wasserstein_1d_sorted(&pa, &pb);
    }
    Ok(total / n_projections as f64)
}

/// Mean over sequences and frame transitions of `‖x^k − x^{k−1}‖ / √d`.
/// Rows of `seqs` are flattened sequences of `frames` frames.
pub fn motion_proxy(seqs: &Mat, frames: usize) -> Result<f64> {
    if frames < 2 {
        return Err(contract(format!("motion needs at least 2 frames, got {frames}")));
    }
    if seqs.rows == 0 || seqs.cols % frames != 0 {
        return Err(Error::Shape(format!("{} coordinates for {frames} frames", seqs.cols)));
    }
    let d = seqs.cols / frames;
    let mut total = 0.0;
    for r in 0..seqs.rows {
        let row = seqs.row(r);
        for k in 1..frames {
            let sq: f64 = (0..d).map(|j| (row[k * d + j] - row[(k - 1) * d + j]).powi(2)).sum();
            total += sq.sqrt() / (d as f64).sqrt();
        }
    }
    Ok(total / (seqs.rows * (frames - 1)) as f64)
}

/// Mean and population standard deviation of the logit gap over the final `window` rows.
pub fn logit_gap_stats(log: &TrainLog, window: usize) -> Result<(f64, f64)> {
    if window == 0 || log.rows.len() < window {
        return Err(contract(format!("window {window} exceeds {} logged iterations", log.rows.len())));
    }
    let gaps: Vec<f64> = log.rows[log.rows.len() - window..].iter().map(|r| r.gap).collect();
    let mean = gaps.iter().sum::<f64>() / window as f64;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / window as f64;
    Ok((mean, var.sqrt()))
}
