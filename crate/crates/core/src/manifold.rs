//! Per-block moment manifolds and the geometry used by the sampler.
//!
//! The image is chunked into `N x N` blocks per channel. For block `b` the
//! manifold `M_t^b` is the set of pixel vectors with a fixed mean and a fixed
//! (population) variance, i.e. a `(d_b - 2)`-sphere sitting inside a
//! hyperplane. `M_t` is the direct product over all blocks, so every
//! projection here acts block by block.
//!
//! At a point `x` of `M_t^b` the normal space is spanned by
//! `n1 = 1 / sqrt(d_b)` and `n2 = (x - mean(x)) / |x - mean(x)|`; the
//! tangent space is everything orthogonal to both.

use ndarray::{s, Array3, ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};
use crate::schedule::Schedule;
use crate::tensor::{shape_of, Image};

/// Relative tolerance for "this point is on the manifold" preconditions.
pub const ON_MANIFOLD_TOL: f64 = 1e-8;

/// Default standard-deviation floor used by the sampler when restricting.
pub const DEFAULT_SIGMA_MIN: f64 = 1e-6;

/// Chunking of a `C x H x W` tensor into `C x N x N` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPartition {
    channels: usize,
    height: usize,
    width: usize,
    blocks: usize,
}

impl BlockPartition {
    pub fn new(shape: [usize; 3], blocks: usize) -> Result<Self> {
        let [channels, height, width] = shape;
        if blocks == 0 || channels == 0 {
            return Err(Error::Config("block count and channels must be positive".into()));
        }
        if height % blocks != 0 || width % blocks != 0 {
            return Err(Error::Config(format!(
                "{blocks} blocks per side do not divide {height}x{width}"
            )));
        }
        let p = Self {
            channels,
            height,
            width,
            blocks,
        };
        if p.block_len() < 3 {
            return Err(Error::Config(format!(
                "blocks of {} pixels are too small (need at least 3)",
                p.block_len()
            )));
        }
        Ok(p)
    }

    pub fn for_image(x: &Image, blocks: usize) -> Result<Self> {
        Self::new(shape_of(x), blocks)
    }

    /// `N`, blocks per side.
    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn stats_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.blocks, self.blocks)
    }

    pub fn block_height(&self) -> usize {
        self.height / self.blocks
    }

    pub fn block_width(&self) -> usize {
        self.width / self.blocks
    }

    /// `d_b`, pixels per block.
    pub fn block_len(&self) -> usize {
        self.block_height() * self.block_width()
    }

    pub fn check(&self, x: &Image) -> Result<()> {
        let actual = shape_of(x);
        if actual != self.shape() {
            return Err(Error::Shape {
                expected: self.shape(),
                actual,
            });
        }
        Ok(())
    }

    pub fn block<'a>(&self, x: &'a Image, c: usize, i: usize, j: usize) -> ArrayView2<'a, f64> {
        let (bh, bw) = (self.block_height(), self.block_width());
        x.slice(s![c, i * bh..(i + 1) * bh, j * bw..(j + 1) * bw])
    }

    pub fn block_mut<'a>(
        &self,
        x: &'a mut Image,
        c: usize,
        i: usize,
        j: usize,
    ) -> ArrayViewMut2<'a, f64> {
        let (bh, bw) = (self.block_height(), self.block_width());
        x.slice_mut(s![c, i * bh..(i + 1) * bh, j * bw..(j + 1) * bw])
    }

    /// All block indices `(c, i, j)` in channel-major order.
    pub fn indices(&self) -> impl Iterator<Item = (usize, usize, usize)> {
        let n = self.blocks;
        (0..self.channels).flat_map(move |c| (0..n).flat_map(move |i| (0..n).map(move |j| (c, i, j))))
    }
}

/// Per-block first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStats {
    pub mean: Array3<f64>,
    pub var: Array3<f64>,
}

fn moments(block: &ArrayView2<f64>) -> (f64, f64) {
    let n = block.len() as f64;
    let mean = block.sum() / n;
    let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Block means and population (divide by `d_b`) variances.
pub fn block_stats(x: &Image, p: &BlockPartition) -> Result<BlockStats> {
    p.check(x)?;
    let mut mean = Array3::zeros(p.stats_shape());
    let mut var = Array3::zeros(p.stats_shape());
    for (c, i, j) in p.indices() {
        let (m, v) = moments(&p.block(x, c, i, j));
        mean[[c, i, j]] = m;
        var[[c, i, j]] = v;
    }
    Ok(BlockStats { mean, var })
}

/// The product manifold `M_t` of per-block moment constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentManifold {
    pub t: usize,
    pub target: BlockStats,
    pub partition: BlockPartition,
}

impl MomentManifold {
    /// Fails unless `x` matches the block targets to [`ON_MANIFOLD_TOL`].
    pub fn check_contains(&self, x: &Image) -> Result<()> {
        check_stats_match(x, &self.target, &self.partition, ON_MANIFOLD_TOL)
    }
}

fn check_stats_match(x: &Image, target: &BlockStats, p: &BlockPartition, tol: f64) -> Result<()> {
    let stats = block_stats(x, p)?;
    for (c, i, j) in p.indices() {
        let (m, v) = (stats.mean[[c, i, j]], stats.var[[c, i, j]]);
        let (tm, tv) = (target.mean[[c, i, j]], target.var[[c, i, j]]);
        let mean_ok = (m - tm).abs() <= tol * (1.0 + tm.abs() + tv.sqrt());
        let var_ok = (v - tv).abs() <= tol * tv.max(f64::MIN_POSITIVE);
        if !(mean_ok && var_ok) {
            return Err(Error::OffManifold {
                c,
                i,
                j,
                detail: format!("block moments ({m}, {v}) vs targets ({tm}, {tv})"),
            });
        }
    }
    Ok(())
}

/// Targets of `M_t` from the reference image's block moments:
/// mean `sqrt(abar_t) * mu`, variance `abar_t * var + (1 - abar_t)`.
pub fn manifold_at(
    y0_stats: &BlockStats,
    schedule: &Schedule,
    t: usize,
    p: &BlockPartition,
) -> Result<MomentManifold> {
    schedule.check_time(t, 0)?;
    if y0_stats.mean.dim() != p.stats_shape() || y0_stats.var.dim() != p.stats_shape() {
        let (c, n, _) = y0_stats.mean.dim();
        return Err(Error::Shape {
            expected: [p.shape()[0], p.blocks(), p.blocks()],
            actual: [c, n, n],
        });
    }
    let ab = schedule.alpha_bar(t);
    let (ah, bh2) = (ab.sqrt(), 1.0 - ab);
    Ok(MomentManifold {
        t,
        target: BlockStats {
            mean: y0_stats.mean.mapv(|m| ah * m),
            var: y0_stats.var.mapv(|v| ab * v + bh2),
        },
        partition: *p,
    })
}

/// Blockwise AdaIN towards arbitrary target moments. With `sigma_floor`
/// set, block deviations below the floor are clamped instead of failing.
pub fn badain(
    x: &Image,
    target: &BlockStats,
    p: &BlockPartition,
    sigma_floor: Option<f64>,
) -> Result<Image> {
    p.check(x)?;
    let mut out = x.clone();
    for (c, i, j) in p.indices() {
        let mut block = p.block_mut(&mut out, c, i, j);
        let (m, v) = moments(&block.view());
        let mut sigma = v.sqrt();
        match sigma_floor {
            Some(floor) => sigma = sigma.max(floor),
            None if sigma == 0.0 => return Err(Error::DegenerateBlock { c, i, j }),
            None => {}
        }
        let scale = target.var[[c, i, j]].sqrt() / sigma;
        let shift = target.mean[[c, i, j]];
        block.mapv_inplace(|u| scale * (u - m) + shift);
    }
    Ok(out)
}

/// Restriction onto `M_t`: re-standardise every block to the manifold targets.
pub fn badain_project(x: &Image, m: &MomentManifold) -> Result<Image> {
    badain(x, &m.target, &m.partition, None)
}

/// [`badain_project`] with a standard-deviation floor for constant blocks.
pub fn badain_project_floored(x: &Image, m: &MomentManifold, sigma_min: f64) -> Result<Image> {
    badain(x, &m.target, &m.partition, Some(sigma_min))
}

/// Orthonormal frame of the per-block normal spaces at a point.
///
/// `n1` is the same for every block (`1 / sqrt(d_b)`); only `n2` is stored,
/// laid out like the image itself.
#[derive(Debug, Clone)]
pub struct NormalFrame {
    n2: Image,
    partition: BlockPartition,
}

impl NormalFrame {
    /// Frame at `x` without checking manifold membership.
    pub fn at(x: &Image, p: &BlockPartition) -> Result<Self> {
        p.check(x)?;
        let mut n2 = x.clone();
        for (c, i, j) in p.indices() {
            let mut block = p.block_mut(&mut n2, c, i, j);
            let (m, _) = moments(&block.view());
            block.mapv_inplace(|u| u - m);
            let len = block.iter().map(|u| u * u).sum::<f64>().sqrt();
            if len == 0.0 {
                return Err(Error::DegenerateBlock { c, i, j });
            }
            block.mapv_inplace(|u| u / len);
        }
        Ok(Self { n2, partition: *p })
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    /// The pair `(n1, n2)` of block `(c, i, j)`, row-major.
    pub fn block_pair(&self, c: usize, i: usize, j: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.partition.block_len();
        let n1 = vec![1.0 / (d as f64).sqrt(); d];
        let n2 = self.partition.block(&self.n2, c, i, j).iter().copied().collect();
        (n1, n2)
    }

    /// Normal component of `v`: per block `mean(v_b) * 1 + <v_b, n2> n2`.
    pub fn normal_part(&self, v: &Image) -> Result<Image> {
        let p = &self.partition;
        p.check(v)?;
        let mut out = Image::zeros(v.raw_dim());
        for (c, i, j) in p.indices() {
            let vb = p.block(v, c, i, j);
            let nb = p.block(&self.n2, c, i, j);
            let mean = vb.sum() / vb.len() as f64;
            let coef: f64 = vb.iter().zip(nb.iter()).map(|(a, b)| a * b).sum();
            let mut ob = p.block_mut(&mut out, c, i, j);
            ob.zip_mut_with(&nb, |o, &n| *o = mean + coef * n);
        }
        Ok(out)
    }

    /// `(tangent, normal)` with `tangent + normal = v`.
    pub fn decompose(&self, v: &Image) -> Result<(Image, Image)> {
        let normal = self.normal_part(v)?;
        let tangent = v - &normal;
        Ok((tangent, normal))
    }

    pub fn tangent_part(&self, v: &Image) -> Result<Image> {
        Ok(self.decompose(v)?.0)
    }
}

/// Normal frame at a point of `M_t`.
pub fn normal_basis(x_on_m: &Image, m: &MomentManifold) -> Result<NormalFrame> {
    m.check_contains(x_on_m)?;
    NormalFrame::at(x_on_m, &m.partition)
}

pub fn tangent_project(x_on_m: &Image, v: &Image, m: &MomentManifold) -> Result<Image> {
    normal_basis(x_on_m, m)?.tangent_part(v)
}

pub fn normal_project(x_on_m: &Image, v: &Image, m: &MomentManifold) -> Result<Image> {
    normal_basis(x_on_m, m)?.normal_part(v)
}

/// Splits `v` into its tangent and normal components at `x_on_m`.
pub fn decompose(x_on_m: &Image, v: &Image, m: &MomentManifold) -> Result<(Image, Image)> {
    normal_basis(x_on_m, m)?.decompose(v)
}

/// Normal displacement carrying `x` (on `from`) onto `to`: per block the
/// centred part is rescaled by `sqrt(var_to / var_from)` and the mean moved
/// to the new target.
pub fn adjacent_map(x: &Image, from: &MomentManifold, to: &MomentManifold) -> Result<Image> {
    if from.partition != to.partition {
        return Err(Error::Config("manifolds use different partitions".into()));
    }
    from.check_contains(x)?;
    let p = &from.partition;
    let mut v = Image::zeros(x.raw_dim());
    for (c, i, j) in p.indices() {
        let (mf, vf) = (from.target.mean[[c, i, j]], from.target.var[[c, i, j]]);
        let (mt, vt) = (to.target.mean[[c, i, j]], to.target.var[[c, i, j]]);
        let ratio = (vt / vf).sqrt();
        let xb = p.block(x, c, i, j);
        let mut vb = p.block_mut(&mut v, c, i, j);
        vb.zip_mut_with(&xb, |o, &u| *o = ratio * (u - mf) + mt - u);
    }
    Ok(v)
}

/// The adjacent map `v` with `x_t + v` on `M_{t-1}` and `v` normal at `x_t`.
pub fn adjacent_map_v(
    x_t: &Image,
    y0_stats: &BlockStats,
    schedule: &Schedule,
    t: usize,
    p: &BlockPartition,
) -> Result<Image> {
    schedule.check_time(t, 1)?;
    let from = manifold_at(y0_stats, schedule, t, p)?;
    let to = manifold_at(y0_stats, schedule, t - 1, p)?;
    adjacent_map(x_t, &from, &to)
}

/// Euclidean distance from each block of `y` to its block manifold.
///
/// Within a block the nearest point of `{mean = m, |x - m| = R}` combines
/// the hyperplane offset `sqrt(d) |mean(y) - m|` with the radial gap
/// `| |y - mean(y)| - R |`.
pub fn block_distances(y: &Image, m: &MomentManifold) -> Result<Array3<f64>> {
    let p = &m.partition;
    let stats = block_stats(y, p)?;
    let d = p.block_len() as f64;
    let mut out = Array3::zeros(p.stats_shape());
    for (c, i, j) in p.indices() {
        let offset = d.sqrt() * (stats.mean[[c, i, j]] - m.target.mean[[c, i, j]]).abs();
        let rho = (d * stats.var[[c, i, j]]).sqrt();
        let radius = (d * m.target.var[[c, i, j]]).sqrt();
        out[[c, i, j]] = offset.hypot(rho - radius);
    }
    Ok(out)
}

/// Distance from `y` to the product manifold.
pub fn distance_to_manifold(y: &Image, m: &MomentManifold) -> Result<f64> {
    Ok(block_distances(y, m)?.iter().map(|d| d * d).sum::<f64>().sqrt())
}

/// Block-mean low-pass filter: every pixel replaced by its block mean.
pub fn low_pass_filter(x: &Image, p: &BlockPartition) -> Result<Image> {
    p.check(x)?;
    let mut out = x.clone();
    for (c, i, j) in p.indices() {
        let mut block = p.block_mut(&mut out, c, i, j);
        let mean = block.sum() / block.len() as f64;
        block.fill(mean);
    }
    Ok(out)
}
