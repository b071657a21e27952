//! Discrete variance-preserving noise schedules.
//!
//! Time indices run over `0..=T`. `t = 0` is clean data (`alpha_bar = 1`),
//! and the stored vectors hold entries for `t = 1..=T` at offset `t - 1`.

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    /// Betas linearly interpolated from `beta_min` to `beta_max` over `steps` entries.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let last = (steps - 1) as f64;
        let betas = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / last)
            .collect();
        Self::from_betas(betas)
    }

    /// A `steps`-entry schedule whose `alpha_bar` values are those of a
    /// `base_steps`-entry linear schedule sampled at evenly spaced indices
    /// (first and last base steps always included).
    pub fn respaced(base_steps: usize, beta_min: f64, beta_max: f64, steps: usize) -> Result<Self> {
        if steps < 2 || steps > base_steps {
            return Err(Error::Config(format!(
                "cannot respace {base_steps} steps to {steps}"
            )));
        }
        let base = Self::linear(base_steps, beta_min, beta_max)?;
        let stride = (base_steps - 1) as f64 / (steps - 1) as f64;
        let alpha_bars = (0..steps)
            .map(|i| base.alpha_bars[(i as f64 * stride).round() as usize])
            .collect();
        Self::from_alpha_bars(alpha_bars)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Config("schedule needs T >= 2".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.len() < 2 {
            return Err(Error::Config("schedule needs T >= 2".into()));
        }
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(alpha_bars.len());
        for &ab in &alpha_bars {
            if !(ab > 0.0 && ab < prev) {
                return Err(Error::Config(format!(
                    "alpha_bar sequence must be strictly decreasing in (0, 1); saw {ab} after {prev}"
                )));
            }
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `beta_t` for `t` in `1..=T`; zero at `t = 0`.
    pub fn beta(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.betas[t - 1]
        }
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alpha_hat(&self, t: usize) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    pub fn beta_hat(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    pub fn check_time(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            Err(Error::TimeRange {
                t,
                min,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// Hex SHA-256 over `T` and the `alpha_bar` sequence (little-endian).
    /// Used to make sure a remote score server runs the same schedule.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.steps() as u64).to_le_bytes());
        for ab in &self.alpha_bars {
            hasher.update(ab.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// One-step sample from the forward kernel: `alpha_hat_t * x0 + beta_hat_t * z`.
pub fn perturb<R: Rng + ?Sized>(
    schedule: &Schedule,
    x0: &Image,
    t: usize,
    rng: &mut R,
) -> Result<Image> {
    schedule.check_time(t, 1)?;
    let (a, b) = (schedule.alpha_hat(t), schedule.beta_hat(t));
    Ok(x0.mapv(|v| a * v + b * rng.sample::<f64, _>(StandardNormal)))
}

/// Ancestral reverse step expressed through the score:
/// `(x + beta_t * score) / sqrt(1 - beta_t) + sqrt(beta_t) * z`.
///
/// No noise is added when `add_noise` is false or at `t = 1`.
pub fn ancestral_step<R: Rng + ?Sized>(
    schedule: &Schedule,
    x: &Image,
    t: usize,
    score: &Image,
    rng: &mut R,
    add_noise: bool,
) -> Result<Image> {
    schedule.check_time(t, 1)?;
    ensure_same_shape(x, score)?;
    let beta = schedule.beta(t);
    let scale = 1.0 / (1.0 - beta).sqrt();
    let mut out = x + &(score * beta);
    out *= scale;
    if add_noise && t > 1 {
        let sigma = beta.sqrt();
        out.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_endpoints() {
        let s = Schedule::linear(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas()[0], 1e-4);
        assert_relative_eq!(s.betas()[99], 0.02, max_relative = 1e-15);
    }

    #[test]
    fn two_step_products() {
        let b = 0.1;
        let s = Schedule::linear(2, b, b).unwrap();
        assert_relative_eq!(s.alpha_bars()[0], 1.0 - b);
        assert_relative_eq!(s.alpha_bars()[1], (1.0 - b) * (1.0 - b), max_relative = 1e-15);
    }

    #[test]
    fn terminal_alpha_bar_matches_log_sum() {
        let s = Schedule::linear(100, 1e-4, 0.02).unwrap();
        let log_sum: f64 = s.betas().iter().map(|b| (1.0 - b).ln()).sum();
        assert_relative_eq!(s.alpha_bars()[99], log_sum.exp(), max_relative = 1e-12);
        // independent rerun of the product in the opposite order
        let rev: f64 = s.betas().iter().rev().map(|b| 1.0 - b).product();
        assert_relative_eq!(s.alpha_bars()[99], rev, max_relative = 1e-12);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(Schedule::linear(1, 1e-4, 0.02).is_err());
        assert!(Schedule::linear(10, 0.0, 0.02).is_err());
        assert!(Schedule::linear(10, 0.03, 0.02).is_err());
        assert!(Schedule::linear(10, 0.1, 1.0).is_err());
        assert!(Schedule::from_alpha_bars(vec![0.5, 0.6]).is_err());
        assert!(Schedule::respaced(10, 1e-4, 0.02, 20).is_err());
    }

    #[test]
    fn vp_identity_and_endpoints() {
        let s = Schedule::respaced(1000, 1e-4, 0.02, 100).unwrap();
        assert_eq!(s.alpha_hat(0), 1.0);
        assert_eq!(s.beta_hat(0), 0.0);
        for t in 0..=s.steps() {
            let sum = s.alpha_hat(t).powi(2) + s.beta_hat(t).powi(2);
            assert!((sum - 1.0).abs() < 1e-12);
        }
        for w in s.alpha_bars().windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn respacing_keeps_base_endpoints() {
        let base = Schedule::linear(1000, 1e-4, 0.02).unwrap();
        let s = Schedule::respaced(1000, 1e-4, 0.02, 100).unwrap();
        assert_eq!(s.alpha_bar(1), base.alpha_bar(1));
        assert_eq!(s.alpha_bar(100), base.alpha_bar(1000));
        assert_eq!(s.alpha_bar(2), base.alpha_bar(11));
        let reconstructed = Schedule::from_betas(s.betas().to_vec()).unwrap();
        for t in 1..=100 {
            assert_relative_eq!(reconstructed.alpha_bar(t), s.alpha_bar(t), max_relative = 1e-10);
        }
    }

    #[test]
    fn perturb_rejects_t_zero() {
        let s = Schedule::linear(10, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Image::zeros((1, 2, 2));
        assert!(matches!(
            perturb(&s, &x, 0, &mut rng),
            Err(Error::TimeRange { .. })
        ));
        assert!(perturb(&s, &x, 11, &mut rng).is_err());
    }

    #[test]
    fn zero_image_perturbation_is_zero_mean() {
        let s = Schedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Image::zeros((1, 2, 2));
        let n = 100_000;
        let t = 60;
        let mut sum = Image::zeros((1, 2, 2));
        for _ in 0..n {
            sum += &perturb(&s, &x, t, &mut rng).unwrap();
        }
        let se = s.beta_hat(t) / (n as f64).sqrt();
        for m in sum.iter() {
            assert!((m / n as f64).abs() < 4.0 * se);
        }
    }

    #[test]
    fn perturbation_moments_match_kernel() {
        let s = Schedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = ndarray::array![[[0.5, -0.25], [1.0, -1.0]]];
        let t = 50;
        let n = 100_000;
        let mut sum = Image::zeros((1, 2, 2));
        let mut sum_sq = Image::zeros((1, 2, 2));
        for _ in 0..n {
            let y = perturb(&s, &x0, t, &mut rng).unwrap();
            sum_sq += &(&y * &y);
            sum += &y;
        }
        let nf = n as f64;
        let target_var = s.beta_hat(t).powi(2);
        let se = s.beta_hat(t) / nf.sqrt();
        for ((m, q), x) in sum.iter().zip(sum_sq.iter()).zip(x0.iter()) {
            let mean = m / nf;
            let var = q / nf - mean * mean;
            assert!((mean - s.alpha_hat(t) * x).abs() < 4.0 * se);
            assert!((var / target_var - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn zero_beta_step_is_identity() {
        // beta_t -> 0 limit: tiny beta leaves x numerically unchanged
        let s = Schedule::from_betas(vec![1e-300, 1e-300]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ndarray::array![[[0.3, -0.7]]];
        let score = ndarray::array![[[5.0, 2.0]]];
        let out = ancestral_step(&s, &x, 2, &score, &mut rng, true).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn noise_free_fixed_point_for_standard_normal() {
        let s = Schedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Image::zeros((1, 1, 3));
        let score = x.mapv(|v| -v);
        for t in [1, 30, 100] {
            let out = ancestral_step(&s, &x, t, &score, &mut rng, false).unwrap();
            assert_eq!(out, x);
        }
        // away from zero the step contracts towards it
        let x = ndarray::array![[[1.0]]];
        let out = ancestral_step(&s, &x, 50, &x.mapv(|v| -v), &mut rng, false).unwrap();
        assert!(out[[0, 0, 0]] < 1.0 && out[[0, 0, 0]] > 0.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let s = Schedule::linear(10, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Image::zeros((1, 2, 2));
        let score = Image::zeros((1, 2, 1));
        assert!(matches!(
            ancestral_step(&s, &x, 3, &score, &mut rng, true),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn reverse_chain_recovers_gaussian_variance() {
        let s = Schedule::respaced(1000, 1e-4, 0.02, 100).unwrap();
        let (mu, var) = (0.4, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let chains = 10_000;
        let mut samples = Vec::with_capacity(chains);
        for _ in 0..chains {
            let mut x = crate::tensor::standard_normal([1, 1, 1], &mut rng);
            for t in (1..=s.steps()).rev() {
                let ab = s.alpha_bar(t);
                let marg = ab * var + 1.0 - ab;
                let score = x.mapv(|v| -(v - ab.sqrt() * mu) / marg);
                x = ancestral_step(&s, &x, t, &score, &mut rng, true).unwrap();
            }
            samples.push(x[[0, 0, 0]]);
        }
        let n = chains as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let v = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((v / var - 1.0).abs() < 0.10, "terminal variance {v}");
        assert!((mean - mu).abs() < 4.0 * (var / n).sqrt());
    }

    #[test]
    fn fingerprint_distinguishes_schedules() {
        let a = Schedule::linear(10, 1e-4, 0.02).unwrap();
        let b = Schedule::linear(10, 1e-4, 0.03).unwrap();
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
