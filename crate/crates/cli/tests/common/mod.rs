//! Independent reference computations for the integration tests. Nothing
//! here calls into the library's manifold or solver code.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sddm_core::energy::FeatureExtractor;
use sddm_core::Image;

pub const FD_STEP: f64 = 1e-4;

/// `alpha_bar_t` of the 1000-step linear schedule on `[1e-4, 0.02]`
/// respaced to 100 steps.
pub fn oracle_alpha_bar(t: usize) -> f64 {
    if t == 0 {
        return 1.0;
    }
    let idx = ((t - 1) as f64 * 999.0 / 99.0).round() as usize;
    (0..=idx).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product()
}

pub fn oracle_beta(t: usize) -> f64 {
    1.0 - oracle_alpha_bar(t) / oracle_alpha_bar(t - 1)
}

fn block_pixels(shape: (usize, usize, usize), blocks: usize) -> Vec<Vec<(usize, usize, usize)>> {
    let (c, h, w) = shape;
    let (bh, bw) = (h / blocks, w / blocks);
    let mut out = vec![Vec::new(); c * blocks * blocks];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[ch * blocks * blocks + (i / bh) * blocks + j / bw].push((ch, i, j));
            }
        }
    }
    out
}

/// Block means and population variances, blocks ordered channel, row, column.
pub fn oracle_block_moments(x: &Image, blocks: usize) -> (Vec<f64>, Vec<f64>) {
    block_pixels(x.dim(), blocks)
        .iter()
        .map(|px| {
            let n = px.len() as f64;
            let mean = px.iter().map(|&i| x[i]).sum::<f64>() / n;
            let var = px.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / n;
            (mean, var)
        })
        .unzip()
}

/// Manifold targets at `alpha_bar`: `sqrt(ab) mu` and `ab var + 1 - ab`.
pub fn oracle_targets(y0: &Image, blocks: usize, ab: &f64) -> (Vec<f64>, Vec<f64>) {
    let (m, v) = oracle_block_moments(y0, blocks);
    (
        m.iter().map(|m| ab.sqrt() * m).collect(),
        v.iter().map(|v| ab * v + 1.0 - ab).collect(),
    )
}

pub fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A random point that already has the given block moments.
pub fn oracle_conforming(rng: &mut ChaCha8Rng, like: &Image, blocks: usize, tm: &[f64], tv: &[f64]) -> Image {
    let mut x = Image::from_shape_simple_fn(like.raw_dim(), || rng.random_range(-1.0..1.0));
    let (m, v) = oracle_block_moments(&x, blocks);
    for (k, px) in block_pixels(like.dim(), blocks).iter().enumerate() {
        for &i in px {
            x[i] = tm[k] + (tv[k] / v[k]).sqrt() * (x[i] - m[k]);
        }
    }
    x
}

/// Orthogonal projection of each block of `v` onto `span{1, x_b}` by
/// solving the 2x2 normal equations.
pub fn oracle_normal_part(x: &Image, v: &Image, p: &sddm_core::manifold::BlockPartition) -> Image {
    let mut out = Image::zeros(v.raw_dim());
    for px in block_pixels(x.dim(), p.blocks()) {
        let n = px.len() as f64;
        let sx: f64 = px.iter().map(|&i| x[i]).sum();
        let sxx: f64 = px.iter().map(|&i| x[i] * x[i]).sum();
        let sv: f64 = px.iter().map(|&i| v[i]).sum();
        let sxv: f64 = px.iter().map(|&i| x[i] * v[i]).sum();
        let det = n * sxx - sx * sx;
        let a = (sxx * sv - sx * sxv) / det;
        let b = (n * sxv - sx * sv) / det;
        for &i in &px {
            out[i] = a + b * x[i];
        }
    }
    out
}

/// Displacement from `x` to the nearest point of the next block targets
/// inside the affine normal plane `x_b + span{1, x_b}`: Gram–Schmidt basis
/// `e1, e2`, then solve the mean and radius constraints for the two
/// coordinates.
pub fn oracle_normal_sphere_intersection(x: &Image, blocks: usize, tm: &[f64], tv: &[f64]) -> Image {
    let mut v = Image::zeros(x.raw_dim());
    for (k, px) in block_pixels(x.dim(), blocks).iter().enumerate() {
        let d = px.len() as f64;
        let xb: Vec<f64> = px.iter().map(|&i| x[i]).collect();
        let e1 = vec![1.0 / d.sqrt(); px.len()];
        let proj: f64 = xb.iter().zip(&e1).map(|(a, b)| a * b).sum();
        let mut e2: Vec<f64> = xb.iter().zip(&e1).map(|(a, b)| a - proj * b).collect();
        let len = e2.iter().map(|u| u * u).sum::<f64>().sqrt();
        e2.iter_mut().for_each(|u| *u /= len);
        // u = x_b + p e1 + q e2; mean(e2) = 0 and the centred part of x_b is len * e2
        let mean_x = proj / d.sqrt();
        let p = d.sqrt() * (tm[k] - mean_x);
        let q = (d * tv[k]).sqrt() - len;
        for (n, &i) in px.iter().enumerate() {
            v[i] = p * e1[n] + q * e2[n];
        }
    }
    v
}

/// `argmin` of `|l v1 + (1 - l) v2|^2` over the grid `0, step, .., 1`.
pub fn oracle_grid_lambda(v1: &Image, v2: &Image, step: f64) -> f64 {
    let dot = |a: &Image, b: &Image| a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
    let (a, b, c) = (dot(v1, v1), dot(v1, v2), dot(v2, v2));
    let steps = (1.0 / step).round() as usize;
    (0..=steps)
        .map(|k| k as f64 * step)
        .map(|l| (l, l * l * a + 2.0 * l * (1.0 - l) * b + (1.0 - l) * (1.0 - l) * c))
        .fold((0.0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
        .0
}

pub struct ChainMoments {
    pub mean: Image,
    pub var: Image,
    /// Largest per-pixel coefficient of the start state in the final sample.
    pub start_weight: f64,
}

/// Exact per-pixel mean and variance after the ancestral chain from
/// `start_t` down to 0 under the analytic score of `N(mu, var)`.
pub fn oracle_gaussian_chain(
    mu: &Image,
    sigma0: &Image,
    start_t: usize,
    start: impl Fn((usize, usize, usize)) -> (f64, f64),
) -> ChainMoments {
    let mut mean = Image::zeros(mu.raw_dim());
    let mut var = Image::zeros(mu.raw_dim());
    let mut start_weight = 0.0f64;
    for idx in ndarray::indices(mu.raw_dim()) {
        let (mut m, mut v) = start(idx);
        let mut w = 1.0;
        for t in (1..=start_t).rev() {
            let ab = oracle_alpha_bar(t);
            let beta = oracle_beta(t);
            let s2 = ab * sigma0[idx] + 1.0 - ab;
            let k = (1.0 - beta / s2) / (1.0 - beta).sqrt();
            let c = beta * ab.sqrt() * mu[idx] / s2 / (1.0 - beta).sqrt();
            m = k * m + c;
            v = k * k * v + if t > 1 { beta } else { 0.0 };
            w *= k;
        }
        mean[idx] = m;
        var[idx] = v;
        start_weight = start_weight.max(w.abs());
    }
    ChainMoments { mean, var, start_weight }
}

/// Whether some pre-activation lies within reach of a kink under a
/// perturbation of size `h` in one input.
pub fn oracle_near_kink(fe: &FeatureExtractor, x: &Image, h: f64) -> bool {
    let wmax = fe.weights().iter().fold(0.0f64, |a, w| a.max(w.abs()));
    fe.pre_activation(x).unwrap().iter().any(|z| z.abs() <= 2.0 * h * wmax)
}

pub fn oracle_central_difference(f: impl Fn(&Image) -> f64, x: &Image, h: f64) -> Image {
    let mut g = Image::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = xp[idx];
        xp[idx] = orig + h;
        let up = f(&xp);
        xp[idx] = orig - h;
        let down = f(&xp);
        xp[idx] = orig;
        g[idx] = (up - down) / (2.0 * h);
    }
    g
}
