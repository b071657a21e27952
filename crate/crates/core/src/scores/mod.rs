//! Score models `s(x, t) ~ grad_x log q_t(x)`.
//!
//! Two analytic families (diagonal Gaussian data and the empirical
//! distribution of a point set) give exact scores for testing, and
//! [`bridge::BridgeScore`] forwards requests to an external process.

pub mod bridge;

use ndarray::Zip;

use crate::error::{Error, Result};
use crate::schedule::Schedule;
use crate::tensor::{ensure_same_shape, Image};

pub use bridge::{BridgeError, BridgeScore, Endpoint};

/// Deterministic score model: the same `(x, t)` always yields the same output.
pub trait ScoreModel: Send + Sync {
    fn score(&self, x: &Image, t: usize) -> Result<Image>;
}

impl<S: ScoreModel + ?Sized> ScoreModel for Box<S> {
    fn score(&self, x: &Image, t: usize) -> Result<Image> {
        (**self).score(x, t)
    }
}

impl<S: ScoreModel + ?Sized> ScoreModel for &S {
    fn score(&self, x: &Image, t: usize) -> Result<Image> {
        (**self).score(x, t)
    }
}

/// Diagonal Gaussian data distribution `N(mean, diag(var))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDomain {
    mean: Image,
    var: Image,
}

impl GaussianDomain {
    pub fn new(mean: Image, var: Image) -> Result<Self> {
        ensure_same_shape(&mean, &var)?;
        if var.iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::Config("Gaussian domain variance must be positive".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn mean(&self) -> &Image {
        &self.mean
    }

    pub fn var(&self) -> &Image {
        &self.var
    }
}

/// Exact score of a Gaussian domain pushed through the VP kernel:
/// `q_t = N(sqrt(abar) mean, abar var + 1 - abar)`.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    domain: GaussianDomain,
    schedule: Schedule,
}

pub fn gaussian_score(domain: GaussianDomain, schedule: Schedule) -> GaussianScore {
    GaussianScore { domain, schedule }
}

impl GaussianScore {
    pub fn domain(&self) -> &GaussianDomain {
        &self.domain
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Marginal mean and per-pixel variance at step `t`.
    pub fn marginal(&self, t: usize) -> (Image, Image) {
        let ab = self.schedule.alpha_bar(t);
        (
            self.domain.mean.mapv(|m| ab.sqrt() * m),
            self.domain.var.mapv(|v| ab * v + 1.0 - ab),
        )
    }

    /// `log q_t(x)` including the normalising constant.
    pub fn log_density(&self, x: &Image, t: usize) -> Result<f64> {
        self.schedule.check_time(t, 1)?;
        ensure_same_shape(&self.domain.mean, x)?;
        let (mean, var) = self.marginal(t);
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        Ok(Zip::from(x)
            .and(&mean)
            .and(&var)
            .fold(0.0, |acc, &x, &m, &v| {
                acc - 0.5 * ((x - m) * (x - m) / v + v.ln() + ln_2pi)
            }))
    }
}

impl ScoreModel for GaussianScore {
    fn score(&self, x: &Image, t: usize) -> Result<Image> {
        self.schedule.check_time(t, 1)?;
        ensure_same_shape(&self.domain.mean, x)?;
        let ab = self.schedule.alpha_bar(t);
        let ah = ab.sqrt();
        let mut out = x.clone();
        Zip::from(&mut out)
            .and(&self.domain.mean)
            .and(&self.domain.var)
            .for_each(|o, &m, &v| *o = -(*o - ah * m) / (ab * v + 1.0 - ab));
        Ok(out)
    }
}

/// Exact score of the empirical distribution of `points` under the VP
/// kernel: a mixture of `N(sqrt(abar) y_k, (1 - abar) I)`.
#[derive(Debug, Clone)]
pub struct KdeScore {
    points: Vec<Image>,
    schedule: Schedule,
}

pub fn kde_score(points: Vec<Image>, schedule: Schedule) -> Result<KdeScore> {
    let first = points.first().ok_or(Error::Empty("kde point set"))?;
    for p in &points[1..] {
        ensure_same_shape(first, p)?;
    }
    Ok(KdeScore { points, schedule })
}

impl KdeScore {
    fn log_weights(&self, x: &Image, t: usize) -> Result<(Vec<f64>, f64)> {
        self.schedule.check_time(t, 1)?;
        ensure_same_shape(&self.points[0], x)?;
        let ab = self.schedule.alpha_bar(t);
        let (ah, noise) = (ab.sqrt(), 1.0 - ab);
        let logits: Vec<f64> = self
            .points
            .iter()
            .map(|y| {
                let d2 = Zip::from(x)
                    .and(y)
                    .fold(0.0, |acc, &a, &b| acc + (a - ah * b).powi(2));
                -d2 / (2.0 * noise)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok((logits, lse))
    }

    /// `log q_t(x)` including the normalising constant.
    pub fn log_density(&self, x: &Image, t: usize) -> Result<f64> {
        let (_, lse) = self.log_weights(x, t)?;
        let noise = 1.0 - self.schedule.alpha_bar(t);
        let d = x.len() as f64;
        Ok(lse - (self.points.len() as f64).ln()
            - 0.5 * d * (2.0 * std::f64::consts::PI * noise).ln())
    }
}

impl ScoreModel for KdeScore {
    fn score(&self, x: &Image, t: usize) -> Result<Image> {
        let (logits, lse) = self.log_weights(x, t)?;
        let ab = self.schedule.alpha_bar(t);
        let (ah, noise) = (ab.sqrt(), 1.0 - ab);
        // sum_k w_k (sqrt(abar) y_k) - x, all over (1 - abar)
        let mut pull = Image::zeros(x.raw_dim());
        for (y, l) in self.points.iter().zip(&logits) {
            let w = (l - lse).exp();
            if w > 0.0 {
                crate::tensor::axpy(&mut pull, w * ah, y);
            }
        }
        Ok((pull - x) / noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{norm, standard_normal};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schedule() -> Schedule {
        Schedule::respaced(1000, 1e-4, 0.02, 100).unwrap()
    }

    fn domain(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> GaussianDomain {
        let mean = standard_normal(shape, rng) * 0.5;
        let var = Image::from_shape_simple_fn((shape[0], shape[1], shape[2]), || {
            rng.random_range(0.2..1.5)
        });
        GaussianDomain::new(mean, var).unwrap()
    }

    /// Central differences of a scalar function, coordinate by coordinate.
    fn fd_gradient(f: impl Fn(&Image) -> f64, x: &Image, h: f64) -> Image {
        let mut g = Image::zeros(x.raw_dim());
        for idx in ndarray::indices(x.raw_dim()) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[idx] += h;
            xm[idx] -= h;
            g[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn gaussian_score_zero_at_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let s = schedule();
        let model = gaussian_score(domain(&mut rng, [1, 3, 3]), s.clone());
        let t = 40;
        let mode = model.domain().mean().mapv(|m| s.alpha_hat(t) * m);
        assert!(model.score(&mode, t).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_variance_domain_has_unit_marginal() {
        let s = schedule();
        let mean = Image::from_elem((1, 2, 2), 0.3);
        let model = gaussian_score(
            GaussianDomain::new(mean.clone(), Image::ones((1, 2, 2))).unwrap(),
            s.clone(),
        );
        let x = ndarray::array![[[1.0, -2.0], [0.5, 0.0]]];
        let t = 70;
        let got = model.score(&x, t).unwrap();
        let want = -(&x - &(&mean * s.alpha_hat(t)));
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_domain_and_time() {
        assert!(GaussianDomain::new(Image::zeros((1, 2, 2)), Image::zeros((1, 2, 2))).is_err());
        assert!(GaussianDomain::new(Image::zeros((1, 2, 2)), Image::ones((1, 2, 1))).is_err());
        let model = gaussian_score(
            GaussianDomain::new(Image::zeros((1, 2, 2)), Image::ones((1, 2, 2))).unwrap(),
            schedule(),
        );
        assert!(model.score(&Image::zeros((1, 2, 2)), 0).is_err());
        assert!(model.score(&Image::zeros((1, 2, 3)), 3).is_err());
    }

    #[test]
    fn gaussian_score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = schedule();
        let model = gaussian_score(domain(&mut rng, [1, 2, 3]), s);
        for t in [1, 10, 35, 70, 100] {
            for _ in 0..20 {
                let x = standard_normal([1, 2, 3], &mut rng);
                let score = model.score(&x, t).unwrap();
                let fd = fd_gradient(|y| model.log_density(y, t).unwrap(), &x, 1e-5);
                let err = norm(&(&score - &fd));
                assert!(err <= 1e-6 * (1.0 + norm(&score)), "t={t} err={err}");
            }
        }
    }

    #[test]
    fn kde_single_point_is_degenerate_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let s = schedule();
        let y = standard_normal([1, 2, 2], &mut rng);
        let model = kde_score(vec![y.clone()], s.clone()).unwrap();
        let x = standard_normal([1, 2, 2], &mut rng);
        let t = 30;
        let ab = s.alpha_bar(t);
        let want = -(&x - &(&y * ab.sqrt())) / (1.0 - ab);
        let got = model.score(&x, t).unwrap();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn kde_symmetric_midpoint_is_stationary() {
        let s = schedule();
        let y = ndarray::array![[[1.0, -0.5], [0.25, 2.0]]];
        let model = kde_score(vec![y.clone(), -&y], s).unwrap();
        let got = model.score(&Image::zeros((1, 2, 2)), 50).unwrap();
        assert!(got.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn kde_empty_rejected() {
        assert!(matches!(kde_score(vec![], schedule()), Err(Error::Empty(_))));
    }

    #[test]
    fn kde_score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = schedule();
        let points: Vec<Image> = (0..5).map(|_| standard_normal([1, 2, 2], &mut rng)).collect();
        let model = kde_score(points, s).unwrap();
        for t in [5, 20, 45, 75, 100] {
            for _ in 0..20 {
                let x = standard_normal([1, 2, 2], &mut rng);
                let score = model.score(&x, t).unwrap();
                let fd = fd_gradient(|y| model.log_density(y, t).unwrap(), &x, 1e-5);
                let err = norm(&(&score - &fd));
                assert!(err <= 1e-6 * (1.0 + norm(&score)), "t={t} err={err}");
            }
        }
    }

    #[test]
    fn kde_survives_tiny_noise_levels() {
        let s = schedule();
        let y = Image::from_elem((1, 4, 4), 1.0);
        let model = kde_score(vec![y.clone(), -&y], s).unwrap();
        // far from both points at t = 1 the raw weights underflow
        let x = Image::from_elem((1, 4, 4), 5.0);
        let score = model.score(&x, 1).unwrap();
        assert!(score.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn kde_translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let s = schedule();
        let points: Vec<Image> = (0..4).map(|_| standard_normal([1, 3, 3], &mut rng)).collect();
        let shift = standard_normal([1, 3, 3], &mut rng);
        let moved: Vec<Image> = points.iter().map(|p| p + &shift).collect();
        let a = kde_score(points, s.clone()).unwrap();
        let b = kde_score(moved, s.clone()).unwrap();
        let t = 60;
        let x = standard_normal([1, 3, 3], &mut rng);
        let xs = &x + &(&shift * s.alpha_hat(t));
        let (sa, sb) = (a.score(&x, t).unwrap(), b.score(&xs, t).unwrap());
        assert!(norm(&(&sa - &sb)) < 1e-10 * (1.0 + norm(&sa)));
    }
}
