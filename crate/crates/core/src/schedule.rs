//! Shifted flow-matching noise schedule.
//!
//! Integer timesteps `t ∈ [0, T]` map to noise levels
//! `σ_t = k·(t/T) / (1 + (k−1)·(t/T))`. Corruption interpolates linearly
//! between data and noise, `x_t = (1−σ_t)·x0 + σ_t·ε`, and networks predict
//! the velocity `ε − x0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    num_timesteps: u32,
    shift: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { num_timesteps: 1000, shift: 5.0 }
    }
}

impl NoiseSchedule {
    pub fn new(num_timesteps: u32, shift: f64) -> Result<Self> {
        if num_timesteps == 0 {
            return Err(Error::Config("num_timesteps must be positive".into()));
        }
        if !(shift.is_finite() && shift > 0.0) {
            return Err(Error::Config(format!("shift must be a positive real, got {shift}")));
        }
        Ok(Self { num_timesteps, shift })
    }

    pub fn num_timesteps(&self) -> u32 {
        self.num_timesteps
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// Noise level for a normalized time `u ∈ [0, 1]`.
    pub fn sigma_frac(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return 1.0;
        }
        self.shift * u / (1.0 + (self.shift - 1.0) * u)
    }

    pub fn sigma_at(&self, t: u32) -> Result<f64> {
        if t > self.num_timesteps {
            return Err(Error::Domain(format!(
                "timestep {t} outside [0, {}]",
                self.num_timesteps
            )));
        }
        // The endpoints are pinned so that σ_0 = 0 and σ_T = 1 hold exactly.
        if t == 0 {
            return Ok(0.0);
        }
        if t == self.num_timesteps {
            return Ok(1.0);
        }
        Ok(self.sigma_frac(t as f64 / self.num_timesteps as f64))
    }

    pub fn sigmas(&self, ts: &[u32]) -> Result<Vec<f64>> {
        ts.iter().map(|&t| self.sigma_at(t)).collect()
    }

    /// `(1−σ_t)·x0 + σ_t·ε`, elementwise.
    pub fn corrupt(&self, x0: &Mat, eps: &Mat, t: u32) -> Result<Mat> {
        let s = self.sigma_at(t)?;
        x0.zip_map(eps, |x, e| (1.0 - s) * x + s * e)
    }

    /// `x_t − σ_t·v`.
    pub fn x0_from_velocity(&self, x_t: &Mat, v: &Mat, t: u32) -> Result<Mat> {
        let s = self.sigma_at(t)?;
        x_t.zip_map(v, |x, v| x - s * v)
    }

    /// Per-sample corruption: row `b` of `x0`/`eps` (a flattened sequence) uses `ts[b]`.
    pub fn corrupt_rows(&self, x0: &Mat, eps: &Mat, ts: &[u32]) -> Result<Mat> {
        x0.expect_shape(eps.shape())?;
        let sig = self.per_row(x0.rows, ts)?;
        let mut out = x0.clone();
        for r in 0..out.rows {
            let s = sig[r];
            for (o, e) in out.row_mut(r).iter_mut().zip(eps.row(r)) {
                *o = (1.0 - s) * *o + s * e;
            }
        }
        Ok(out)
    }

    /// Per-sample `x_t − σ_t·v`.
    pub fn x0_from_velocity_rows(&self, x_t: &Mat, v: &Mat, ts: &[u32]) -> Result<Mat> {
        x_t.expect_shape(v.shape())?;
        let sig = self.per_row(x_t.rows, ts)?;
        let mut out = x_t.clone();
        for r in 0..out.rows {
            let s = sig[r];
            for (o, vv) in out.row_mut(r).iter_mut().zip(v.row(r)) {
                *o -= s * vv;
            }
        }
        Ok(out)
    }

    fn per_row(&self, rows: usize, ts: &[u32]) -> Result<Vec<f64>> {
        if ts.is_empty() || rows % ts.len() != 0 {
            return Err(Error::Shape(format!("{} timesteps for {rows} rows", ts.len())));
        }
        let group = rows / ts.len();
        let sig = self.sigmas(ts)?;
        Ok((0..rows).map(|r| sig[r / group]).collect())
    }
}

/// `ε − x0`, elementwise.
pub fn velocity_target(x0: &Mat, eps: &Mat) -> Result<Mat> {
    x0.zip_map(eps, |x, e| e - x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Mat {
        Mat::scalar(v)
    }

    #[test]
    fn sigma_examples() {
        let s = NoiseSchedule::new(1000, 5.0).unwrap();
        assert_eq!(s.sigma_at(0).unwrap(), 0.0);
        assert_eq!(s.sigma_at(1000).unwrap(), 1.0);
        // 2.5 / 3
        assert!((s.sigma_at(500).unwrap() - 0.833_333_333_333_333_3).abs() < 1e-12);
    }

    #[test]
    fn sigma_out_of_range_is_domain_error() {
        let s = NoiseSchedule::default();
        assert!(matches!(s.sigma_at(1001), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_schedule_rejected() {
        assert!(NoiseSchedule::new(0, 5.0).is_err());
        assert!(NoiseSchedule::new(1000, 0.0).is_err());
        assert!(NoiseSchedule::new(1000, f64::NAN).is_err());
    }

    #[test]
    fn corrupt_examples() {
        let s = NoiseSchedule::default();
        let x0 = Mat::from_vec(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let eps = Mat::from_vec(1, 3, vec![1.0, 0.5, -0.2]).unwrap();
        assert_eq!(s.corrupt(&x0, &eps, 0).unwrap(), x0);
        assert_eq!(s.corrupt(&x0, &eps, 1000).unwrap(), eps);
        let mid = s.corrupt(&scalar(1.0), &scalar(0.0), 500).unwrap();
        assert!((mid.data[0] - 0.166_667).abs() < 1e-6);
        assert!(s.corrupt(&x0, &scalar(0.0), 3).is_err());
    }

    #[test]
    fn velocity_examples() {
        let v = velocity_target(&scalar(0.2), &scalar(-0.3)).unwrap();
        assert!((v.data[0] + 0.5).abs() < 1e-15);
        let e = Mat::from_vec(1, 2, vec![0.4, -0.1]).unwrap();
        assert_eq!(velocity_target(&e, &e).unwrap(), Mat::zeros(1, 2));
        assert_eq!(velocity_target(&Mat::zeros(1, 2), &e).unwrap(), e);
        assert!(velocity_target(&e, &scalar(1.0)).is_err());
    }

    #[test]
    fn x0_from_velocity_examples() {
        let s = NoiseSchedule::default();
        let x = s.x0_from_velocity(&scalar(0.5), &scalar(1.0), 500).unwrap();
        assert!((x.data[0] + 0.333_333).abs() < 1e-6);
        let xt = Mat::from_vec(1, 2, vec![0.7, 0.1]).unwrap();
        let v = Mat::from_vec(1, 2, vec![9.0, -4.0]).unwrap();
        assert_eq!(s.x0_from_velocity(&xt, &v, 0).unwrap(), xt);
    }

    #[test]
    fn unit_shift_is_linear() {
        let s = NoiseSchedule::new(1000, 1.0).unwrap();
        for t in (0..=1000).step_by(10) {
            assert!((s.sigma_at(t).unwrap() - t as f64 / 1000.0).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn round_trip_identity(
            t in 0u32..=1000,
            x0 in prop::collection::vec(-5.0f64..5.0, 6),
            eps in prop::collection::vec(-5.0f64..5.0, 6),
        ) {
            let s = NoiseSchedule::default();
            let x0 = Mat::from_vec(2, 3, x0).unwrap();
            let eps = Mat::from_vec(2, 3, eps).unwrap();
            let xt = s.corrupt(&x0, &eps, t).unwrap();
            let v = velocity_target(&x0, &eps).unwrap();
            let back = s.x0_from_velocity(&xt, &v, t).unwrap();
            prop_assert!(back.max_abs_diff(&x0) < 1e-14);
        }

        #[test]
        fn sigma_strictly_increasing(a in 0u32..1000, b in 0u32..1000, k in 0.1f64..20.0) {
            prop_assume!(a != b);
            let (lo, hi) = (a.min(b), a.max(b));
            let s = NoiseSchedule::new(1000, k).unwrap();
            prop_assert!(s.sigma_at(lo).unwrap() < s.sigma_at(hi).unwrap());
        }
    }
}
