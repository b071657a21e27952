//! Energy guidance functions `e(x, y0, t)` with analytic gradients.
//!
//! The main energy is the weak feature-space BAdaIN energy: features of
//! `x` are compared block by block with the features of the expected
//! perturbed reference `sqrt(abar_t) * y0`, and the energy is the squared
//! distance between `x`'s features and their BAdaIN restyling.

use std::path::Path;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::manifold::{badain, block_stats, BlockPartition, DEFAULT_SIGMA_MIN};
use crate::schedule::Schedule;
use crate::tensor::{ensure_same_shape, norm_sq, Image};

pub trait Energy: Send + Sync {
    fn value(&self, x: &Image, y0: &Image, t: usize) -> Result<f64>;
    fn gradient(&self, x: &Image, y0: &Image, t: usize) -> Result<Image>;
}

impl<E: Energy + ?Sized> Energy for Box<E> {
    fn value(&self, x: &Image, y0: &Image, t: usize) -> Result<f64> {
        (**self).value(x, y0, t)
    }
    fn gradient(&self, x: &Image, y0: &Image, t: usize) -> Result<Image> {
        (**self).gradient(x, y0, t)
    }
}

pub fn energy_gradient<E: Energy + ?Sized>(e: &E, x: &Image, y0: &Image, t: usize) -> Result<Image> {
    e.gradient(x, y0, t)
}

const WEIGHT_MAGIC: &str = "SDDMCONV1";

/// A single same-padded convolution followed by a rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    /// `out x in x k x k`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::Config("feature extractor needs positive channel counts".into()));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {kernel} must be odd")));
        }
        let n = out_channels * in_channels * kernel * kernel;
        if weights.len() != n || bias.len() != out_channels {
            return Err(Error::Config(format!(
                "expected {n} weights and {out_channels} biases, got {} and {}",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel,
            weights,
            bias,
        })
    }

    /// He-initialised random weights and zero bias.
    pub fn from_seed(seed: u64, out_channels: usize, in_channels: usize, kernel: usize) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel).max(1) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = out_channels * in_channels * kernel * kernel;
        let weights = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Self::new(out_channels, in_channels, kernel, weights, vec![0.0; out_channels])
    }

    /// Parses `SDDMCONV1 <out> <in> <k>\n` followed by little-endian `f32`
    /// weights then biases.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::WeightFormat("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::WeightFormat("header is not UTF-8".into()))?;
        let mut fields = header.split(' ');
        if fields.next() != Some(WEIGHT_MAGIC) {
            return Err(Error::WeightFormat(format!("bad magic in header {header:?}")));
        }
        let mut dim = |name: &str| -> Result<usize> {
            fields
                .next()
                .and_then(|f| f.parse::<usize>().ok())
                .ok_or_else(|| Error::WeightFormat(format!("missing or bad {name} in header")))
        };
        let (out, inp, k) = (dim("out")?, dim("in")?, dim("k")?);
        if fields.next().is_some() {
            return Err(Error::WeightFormat("trailing header fields".into()));
        }
        let count = out
            .checked_mul(inp)
            .and_then(|v| v.checked_mul(k))
            .and_then(|v| v.checked_mul(k))
            .and_then(|v| v.checked_add(out))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::WeightFormat("dimensions overflow".into()))?;
        let body = &bytes[nl + 1..];
        if body.len() != count {
            return Err(Error::WeightFormat(format!(
                "expected {count} payload bytes, found {}",
                body.len()
            )));
        }
        let mut floats = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let weights: Vec<f64> = floats.by_ref().take(out * inp * k * k).collect();
        let bias: Vec<f64> = floats.collect();
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::WeightFormat("non-finite weight".into()));
        }
        Self::new(out, inp, k, weights, bias).map_err(|e| Error::WeightFormat(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "{WEIGHT_MAGIC} {} {} {}\n",
            self.out_channels, self.in_channels, self.kernel
        )
        .into_bytes();
        for v in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    /// `out x in x k x k` weights, row-major.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn check_input(&self, x: &Image) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape {
                expected: [self.in_channels, h, w],
                actual: [c, h, w],
            });
        }
        Ok(())
    }

    /// Convolution output before the rectifier.
    pub fn pre_activation(&self, x: &Image) -> Result<Image> {
        self.check_input(x)?;
        let (_, h, w) = x.dim();
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let (k, pad) = (self.kernel, self.kernel / 2);
        let mut out = vec![0.0; self.out_channels * h * w];
        for o in 0..self.out_channels {
            let dst = &mut out[o * h * w..(o + 1) * h * w];
            dst.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let plane = &src[i * h * w..(i + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weights[((o * self.in_channels + i) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for (y, x0, x1, sy, sx) in taps(h, w, ky, kx, pad) {
                            let row = &mut dst[y * w + x0..y * w + x1];
                            let from = &plane[sy * w + sx..sy * w + sx + (x1 - x0)];
                            for (d, s) in row.iter_mut().zip(from) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        Ok(Array3::from_shape_vec((self.out_channels, h, w), out).expect("sized"))
    }

    /// Rectified features.
    pub fn extract(&self, x: &Image) -> Result<Image> {
        Ok(self.pre_activation(x)?.mapv(|v| v.max(0.0)))
    }

    /// Adjoint of the convolution (without bias): maps an output-space
    /// gradient back to input space.
    pub fn conv_transpose(&self, grad_out: &Image) -> Result<Image> {
        let (c, h, w) = grad_out.dim();
        if c != self.out_channels {
            return Err(Error::Shape {
                expected: [self.out_channels, h, w],
                actual: [c, h, w],
            });
        }
        let g = grad_out.as_standard_layout();
        let src = g.as_slice().expect("standard layout");
        let (k, pad) = (self.kernel, self.kernel / 2);
        let mut out = vec![0.0; self.in_channels * h * w];
        for o in 0..self.out_channels {
            let gplane = &src[o * h * w..(o + 1) * h * w];
            for i in 0..self.in_channels {
                let dst = &mut out[i * h * w..(i + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weights[((o * self.in_channels + i) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for (y, x0, x1, sy, sx) in taps(h, w, ky, kx, pad) {
                            let from = &gplane[y * w + x0..y * w + x1];
                            let row = &mut dst[sy * w + sx..sy * w + sx + (x1 - x0)];
                            for (d, s) in row.iter_mut().zip(from) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        Ok(Array3::from_shape_vec((self.in_channels, h, w), out).expect("sized"))
    }
}

/// For kernel offset `(ky, kx)`: every output row `y` with its valid column
/// range `[x0, x1)` and the matching source origin `(sy, sx)`.
fn taps(
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    pad: usize,
) -> impl Iterator<Item = (usize, usize, usize, usize, usize)> {
    let dy = ky as isize - pad as isize;
    let dx = kx as isize - pad as isize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)).max(x0 as isize) as usize;
    (0..h).filter_map(move |y| {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize || x1 <= x0 {
            None
        } else {
            Some((y, x0, x1, sy as usize, (x0 as isize + dx) as usize))
        }
    })
}

/// `e(x) = |BAdaIN(f(x), f(y_t)) - f(x)|^2` with `f` the feature extractor
/// and `y_t = sqrt(abar_t) * y0`.
#[derive(Debug, Clone)]
pub struct BadainFeatureEnergy {
    extractor: FeatureExtractor,
    blocks: usize,
    schedule: Schedule,
    sigma_min: f64,
}

impl BadainFeatureEnergy {
    pub fn new(extractor: FeatureExtractor, blocks: usize, schedule: Schedule) -> Self {
        Self {
            extractor,
            blocks,
            schedule,
            sigma_min: DEFAULT_SIGMA_MIN,
        }
    }

    pub fn with_sigma_min(mut self, sigma_min: f64) -> Self {
        self.sigma_min = sigma_min;
        self
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    fn reference_features(&self, y0: &Image, t: usize) -> Result<Image> {
        self.schedule.check_time(t, 0)?;
        let ah = self.schedule.alpha_hat(t);
        self.extractor.extract(&y0.mapv(|v| ah * v))
    }

    fn partition(&self, features: &Image) -> Result<BlockPartition> {
        BlockPartition::for_image(features, self.blocks)
    }
}

impl Energy for BadainFeatureEnergy {
    fn value(&self, x: &Image, y0: &Image, t: usize) -> Result<f64> {
        ensure_same_shape(y0, x)?;
        let fx = self.extractor.extract(x)?;
        let fy = self.reference_features(y0, t)?;
        let p = self.partition(&fx)?;
        let target = block_stats(&fy, &p)?;
        let styled = badain(&fx, &target, &p, Some(self.sigma_min))?;
        Ok(norm_sq(&(styled - &fx)))
    }

    fn gradient(&self, x: &Image, y0: &Image, t: usize) -> Result<Image> {
        ensure_same_shape(y0, x)?;
        let pre = self.extractor.pre_activation(x)?;
        let fx = pre.mapv(|v| v.max(0.0));
        let fy = self.reference_features(y0, t)?;
        let p = self.partition(&fx)?;
        let own = block_stats(&fx, &p)?;
        let target = block_stats(&fy, &p)?;
        let mut grad = Image::zeros(fx.raw_dim());
        for (c, i, j) in p.indices() {
            let (mx, sx) = (own.mean[[c, i, j]], own.var[[c, i, j]].sqrt());
            let (my, sy) = (target.mean[[c, i, j]], target.var[[c, i, j]].sqrt());
            // per block: d * [(sy/s - 1)^2 sx^2 + (my - mx)^2], s = max(sx, floor)
            let centred_coef = if sx >= self.sigma_min {
                2.0 * (1.0 - sy / sx)
            } else {
                2.0 * (sy / self.sigma_min - 1.0).powi(2)
            };
            let mean_term = 2.0 * (mx - my);
            let src = p.block(&fx, c, i, j);
            let mut dst = p.block_mut(&mut grad, c, i, j);
            dst.zip_mut_with(&src, |g, &f| *g = centred_coef * (f - mx) + mean_term);
        }
        // rectifier subgradient is 0 at the kink
        grad.zip_mut_with(&pre, |g, &z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        self.extractor.conv_transpose(&grad)
    }
}

/// Quadratic pull towards a fixed image: `e(x) = |x - anchor|^2 / 2`.
#[derive(Debug, Clone)]
pub struct AnchorEnergy {
    anchor: Image,
}

impl AnchorEnergy {
    pub fn new(anchor: Image) -> Self {
        Self { anchor }
    }
}

impl Energy for AnchorEnergy {
    fn value(&self, x: &Image, _y0: &Image, _t: usize) -> Result<f64> {
        ensure_same_shape(&self.anchor, x)?;
        Ok(0.5 * norm_sq(&(x - &self.anchor)))
    }

    fn gradient(&self, x: &Image, _y0: &Image, _t: usize) -> Result<Image> {
        ensure_same_shape(&self.anchor, x)?;
        Ok(x - &self.anchor)
    }
}
