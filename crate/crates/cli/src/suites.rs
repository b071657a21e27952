//! Default parameterisation of the verification suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sddm_core::manifold::{block_stats, manifold_at, BlockPartition};
use sddm_core::schedule::Schedule;
use sddm_core::scores::{gaussian_score, GaussianDomain, GaussianScore};
use sddm_core::verify::{
    concentration_suite, decomposition_suite, lowpass_expectation_suite, separability_suite, SuiteReport,
    VerificationReport,
};
use sddm_core::{Image, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Concentration,
    Separability,
    Lowpass,
    Decomposition,
    All,
}

pub const CONCENTRATION_D: [usize; 3] = [64, 256, 1024];
pub const CONCENTRATION_N: usize = 10_000;
pub const SEPARABILITY_N: usize = 10_000;
pub const LOWPASS_N: usize = 100_000;
pub const DECOMPOSITION_N: usize = 1_000;

fn uniform_image(shape: (usize, usize, usize), centre: f64, half_width: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_shape_simple_fn(shape, || centre + half_width * rng.random_range(-1.0..=1.0))
}

/// Concentration times at quarter, half, three quarters and the end.
pub fn concentration_times(steps: usize) -> Vec<usize> {
    vec![steps / 4, steps / 2, (3 * steps) / 4, steps]
}

/// One `16 x 16` block with mean near 0.8.
pub fn separability_reference(seed: u64) -> Image {
    uniform_image((1, 16, 16), 0.8, 0.15, seed)
}

/// `1 x 16 x 16` image with `U(-1, 1)` pixels, split into `4 x 4` blocks.
pub fn lowpass_reference(seed: u64) -> (Image, BlockPartition) {
    let y0 = uniform_image((1, 16, 16), 0.0, 1.0, seed);
    let p = BlockPartition::for_image(&y0, 4).expect("16 divides by 4");
    (y0, p)
}

pub fn lowpass_times(steps: usize) -> Vec<usize> {
    vec![steps / 5, (7 * steps) / 10]
}

/// Pixelwise Gaussian toy on `1 x 16 x 16` with structured mean and variance.
pub fn gaussian_toy(schedule: &Schedule) -> GaussianScore {
    let mean = Image::from_shape_fn((1, 16, 16), |(_, i, j)| 0.4 * (0.4 * i as f64 + 0.25 * j as f64).sin());
    let var = Image::from_shape_fn((1, 16, 16), |(_, i, j)| 0.3 + 0.1 * ((i + j) % 3) as f64);
    gaussian_score(GaussianDomain::new(mean, var).expect("positive variance"), schedule.clone())
}

pub fn run_one(suite: Suite, schedule: &Schedule, seed: u64) -> Result<VerificationReport> {
    let steps = schedule.steps();
    let report: SuiteReport = match suite {
        Suite::Concentration => {
            concentration_suite(schedule, &CONCENTRATION_D, &concentration_times(steps), CONCENTRATION_N, seed)?
        }
        Suite::Separability => {
            let y0 = separability_reference(seed);
            separability_suite(schedule, &y0, 1, SEPARABILITY_N, seed)?
        }
        Suite::Lowpass => {
            let (y0, p) = lowpass_reference(seed);
            lowpass_expectation_suite(&y0, &p, schedule, &lowpass_times(steps), LOWPASS_N, seed)?
        }
        Suite::Decomposition => {
            let score = gaussian_toy(schedule);
            let y0 = uniform_image((1, 16, 16), 0.1, 0.8, seed);
            let p = BlockPartition::for_image(&y0, 4)?;
            let m = manifold_at(&block_stats(&y0, &p)?, schedule, steps / 2, &p)?;
            decomposition_suite(&score, &m, DECOMPOSITION_N, seed)?
        }
        Suite::All => {
            let mut all = VerificationReport::default();
            for s in [Suite::Concentration, Suite::Separability, Suite::Lowpass, Suite::Decomposition] {
                all = all.merge(run_one(s, schedule, seed)?);
            }
            return Ok(all);
        }
    };
    Ok(report.into())
}
