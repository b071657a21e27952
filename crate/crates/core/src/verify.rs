//! Monte Carlo checks of the manifold geometry, SSIM, and trace profiles.
//!
//! Every suite is deterministic in `(seed, n)`; independent cells draw
//! from `seed ^ cell_index`. Each case carries its gate as text so a
//! report can be read on its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{
    badain_project, block_distances, block_stats, low_pass_filter, manifold_at, BlockPartition,
    MomentManifold, NormalFrame,
};
use crate::sampler::StepTrace;
use crate::schedule::{perturb, Schedule};
use crate::scores::ScoreModel;
use crate::tensor::{dot, ensure_same_shape, norm, standard_normal, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub name: String,
    pub stats: BTreeMap<String, f64>,
    pub gate: String,
    /// `None` for informational cases.
    pub passed: Option<bool>,
}

impl Case {
    fn new(name: impl Into<String>, gate: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            stats: BTreeMap::new(),
            gate: gate.into(),
            passed: None,
        }
    }

    fn stat(mut self, key: &str, v: f64) -> Self {
        self.stats.insert(key.to_string(), v);
        self
    }

    fn verdict(mut self, ok: bool) -> Self {
        self.passed = Some(ok);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub params: BTreeMap<String, serde_json::Value>,
    pub cases: Vec<Case>,
}

impl SuiteReport {
    fn new(suite: &str, seed: u64) -> Self {
        Self {
            suite: suite.to_string(),
            seed,
            params: BTreeMap::new(),
            cases: Vec::new(),
        }
    }

    fn param(mut self, key: &str, v: impl Serialize) -> Self {
        self.params
            .insert(key.to_string(), serde_json::to_value(v).expect("serialisable parameter"));
        self
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed != Some(false))
    }

    pub fn case(&self, name: &str) -> Option<&Case> {
        self.cases.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub suites: Vec<SuiteReport>,
}

impl From<SuiteReport> for VerificationReport {
    fn from(s: SuiteReport) -> Self {
        Self { suites: vec![s] }
    }
}

impl VerificationReport {
    pub fn merge(mut self, other: VerificationReport) -> Self {
        self.suites.extend(other.suites);
        self
    }

    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            let verdict = if s.passed() { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "== {} (seed {}) {verdict}", s.suite, s.seed);
            for (k, v) in &s.params {
                let _ = writeln!(out, "   {k} = {v}");
            }
            let width = s.cases.iter().map(|c| c.name.len()).max().unwrap_or(0);
            for c in &s.cases {
                let tag = match c.passed {
                    Some(true) => "pass",
                    Some(false) => "FAIL",
                    None => "info",
                };
                let stats: Vec<String> = c.stats.iter().map(|(k, v)| format!("{k}={v:.6e}")).collect();
                let _ = writeln!(
                    out,
                    "   [{tag}] {:<width$}  {}  gate: {}",
                    c.name,
                    stats.join(" "),
                    c.gate
                );
            }
        }
        out
    }
}

fn cell_rng(seed: u64, cell: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ cell as u64)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn side_of(d: usize) -> Result<usize> {
    let s = (d as f64).sqrt().round() as usize;
    if s * s != d || d < 3 {
        return Err(Error::Config(format!("block size {d} must be a square of at least 4")));
    }
    Ok(s)
}

pub const CONCENTRATION_EPS: f64 = 0.2;
pub const CONCENTRATION_GATE: f64 = 0.95;

/// Per `(d_b, t)`: distance of `y_t` to `M_t` over `sqrt(d_b)` for a single
/// `sqrt(d_b) x sqrt(d_b)` block with `y0 ~ U(-1, 1)`.
pub fn concentration_suite(
    schedule: &Schedule,
    d_grid: &[usize],
    t_grid: &[usize],
    n: usize,
    seed: u64,
) -> Result<SuiteReport> {
    if n == 0 || d_grid.is_empty() || t_grid.is_empty() {
        return Err(Error::Empty("concentration grid"));
    }
    for &t in t_grid {
        schedule.check_time(t, 0)?;
    }
    let cells: Vec<(usize, usize)> = t_grid
        .iter()
        .flat_map(|&t| d_grid.iter().map(move |&d| (d, t)))
        .collect();
    let results: Vec<(f64, f64)> = cells
        .par_iter()
        .enumerate()
        .map(|(idx, &(d, t))| -> Result<(f64, f64)> {
            let side = side_of(d)?;
            let mut rng = cell_rng(seed, idx);
            let u = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
            let y0 = Image::from_shape_simple_fn((1, side, side), || u.sample(&mut rng));
            let p = BlockPartition::for_image(&y0, 1)?;
            let m = manifold_at(&block_stats(&y0, &p)?, schedule, t, &p)?;
            let mut ratios = Vec::with_capacity(n);
            for _ in 0..n {
                let y = if t == 0 { y0.clone() } else { perturb(schedule, &y0, t, &mut rng)? };
                ratios.push(block_distances(&y, &m)?[[0, 0, 0]] / (d as f64).sqrt());
            }
            let below = ratios.iter().filter(|r| **r < CONCENTRATION_EPS).count() as f64 / n as f64;
            Ok((median(&mut ratios), below))
        })
        .collect::<Result<_>>()?;
    let mut report = SuiteReport::new("concentration", seed)
        .param("d_grid", d_grid)
        .param("t_grid", t_grid)
        .param("n", n)
        .param("eps", CONCENTRATION_EPS);
    let d_max = *d_grid.iter().max().expect("non-empty");
    for (ti, &t) in t_grid.iter().enumerate() {
        let row = &results[ti * d_grid.len()..(ti + 1) * d_grid.len()];
        for (&d, &(med, frac)) in d_grid.iter().zip(row) {
            let case = Case::new(format!("t={t} d={d}"), "none (cell statistics)")
                .stat("median_ratio", med)
                .stat("fraction_below_eps", frac);
            let case = if d == d_max {
                let c = Case {
                    gate: format!("fraction_below_eps >= {CONCENTRATION_GATE}"),
                    ..case
                };
                c.verdict(frac >= CONCENTRATION_GATE)
            } else {
                case
            };
            report.cases.push(case);
        }
        let mut order: Vec<(usize, f64)> = d_grid.iter().copied().zip(row.iter().map(|r| r.0)).collect();
        order.sort_by_key(|(d, _)| *d);
        let decreasing = order.windows(2).all(|w| w[1].1 < w[0].1);
        report.cases.push(
            Case::new(format!("t={t} median decreasing in d"), "strictly decreasing medians")
                .stat("median_min_d", order[0].1)
                .stat("median_max_d", order[order.len() - 1].1)
                .verdict(decreasing),
        );
    }
    Ok(report)
}

pub const SEPARATION_SE: f64 = 6.0;
pub const SEPARABILITY_GATE: f64 = 0.99;

fn alpha_hat_at(schedule: &Schedule, time: f64) -> f64 {
    let lo = time.floor() as usize;
    let hi = time.ceil() as usize;
    let frac = time - lo as f64;
    (1.0 - frac) * schedule.alpha_hat(lo) + frac * schedule.alpha_hat(hi)
}

/// Classifies block means of `y_t` and `y_t'` by the hyperplane
/// `mean = alpha_hat_{(t+t')/2} * mu[y0]`. Only blocks whose two mean
/// targets differ by more than six pooled standard errors take part.
pub fn separability_suite(
    schedule: &Schedule,
    y0: &Image,
    blocks: usize,
    n: usize,
    seed: u64,
) -> Result<SuiteReport> {
    if n == 0 {
        return Err(Error::Empty("separability samples"));
    }
    let steps = schedule.steps();
    let p = BlockPartition::for_image(y0, blocks)?;
    let mu = block_stats(y0, &p)?.mean;
    let d = p.block_len() as f64;
    let far = ((9 * steps) / 10, steps / 10);
    let mid = ((7 * steps) / 10, (3 * steps) / 10);
    let adj = (steps / 2, steps / 2 - 1);
    let pairs = [("far", far, true), ("middle", mid, true), ("adjacent", adj, false)];
    let mut report = SuiteReport::new("separability", seed)
        .param("n_per_time", n)
        .param("block_len", p.block_len())
        .param("blocks", blocks)
        .param("separation_se", SEPARATION_SE);
    for (idx, (label, (t, t2), gated)) in pairs.iter().enumerate() {
        let (t, t2) = (*t, *t2);
        let name = format!("{label} pair t={t} t'={t2}");
        if t == t2 || t2 == 0 && t == 0 {
            continue;
        }
        let (a, a2) = (schedule.alpha_hat(t), schedule.alpha_hat(t2));
        let (b, b2) = (schedule.beta_hat(t), schedule.beta_hat(t2));
        let se = ((b * b + b2 * b2) / (2.0 * d)).sqrt();
        let eligible: Vec<(usize, usize, usize)> = p
            .indices()
            .filter(|&idx| (a - a2).abs() * mu[idx].abs() > SEPARATION_SE * se)
            .collect();
        let gate = if *gated {
            format!("fraction_correct >= {SEPARABILITY_GATE}")
        } else {
            "none (adjacent pairs separate only asymptotically)".to_string()
        };
        if eligible.is_empty() {
            let case = Case::new(name, gate).stat("eligible_blocks", 0.0);
            report.cases.push(if *gated { case.verdict(false) } else { case });
            continue;
        }
        let a_mid = alpha_hat_at(schedule, 0.5 * (t + t2) as f64);
        let mut rng = cell_rng(seed, idx);
        let mut correct = 0usize;
        let mut total = 0usize;
        for _ in 0..n {
            for (time, other) in [(t, t2), (t2, t)] {
                let y = perturb(schedule, y0, time, &mut rng)?;
                let stats = block_stats(&y, &p)?;
                let (own_a, other_a) = (schedule.alpha_hat(time), schedule.alpha_hat(other));
                for &bi in &eligible {
                    let h = a_mid * mu[bi];
                    let own_side = (own_a - other_a) * mu[bi];
                    if (stats.mean[bi] - h) * own_side > 0.0 {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
        let frac = correct as f64 / total as f64;
        let case = Case::new(name, gate)
            .stat("fraction_correct", frac)
            .stat("eligible_blocks", eligible.len() as f64)
            .stat("pooled_se", se);
        report.cases.push(if *gated { case.verdict(frac >= SEPARABILITY_GATE) } else { case });
    }
    Ok(report)
}

pub const LOWPASS_SE_BAND: f64 = 4.0;

/// Empirical `E[Phi(y_t)]` against `alpha_hat_t * mu[y0]` per block.
pub fn lowpass_expectation_suite(
    y0: &Image,
    p: &BlockPartition,
    schedule: &Schedule,
    t_grid: &[usize],
    n: usize,
    seed: u64,
) -> Result<SuiteReport> {
    if n < 2 || t_grid.is_empty() {
        return Err(Error::Empty("low-pass samples"));
    }
    p.check(y0)?;
    let mu = block_stats(y0, p)?.mean;
    let cells: Vec<Case> = t_grid
        .par_iter()
        .enumerate()
        .map(|(idx, &t)| -> Result<Case> {
            schedule.check_time(t, 1)?;
            let mut rng = cell_rng(seed, idx);
            let shape = p.stats_shape();
            let mut sum = ndarray::Array3::<f64>::zeros(shape);
            let mut sum_sq = ndarray::Array3::<f64>::zeros(shape);
            for _ in 0..n {
                let y = perturb(schedule, y0, t, &mut rng)?;
                let m = block_stats(&y, p)?.mean;
                sum += &m;
                sum_sq += &(&m * &m);
            }
            let nf = n as f64;
            let a = schedule.alpha_hat(t);
            let mut worst = 0.0f64;
            for bi in p.indices() {
                let mean = sum[bi] / nf;
                let var = (sum_sq[bi] / nf - mean * mean) * nf / (nf - 1.0);
                let se = (var.max(0.0) / nf).sqrt();
                let z = (mean - a * mu[bi]).abs() / se;
                worst = worst.max(z);
            }
            let phi_check = {
                // the filter really is the block mean broadcast
                let y = perturb(schedule, y0, t, &mut rng)?;
                let lp = low_pass_filter(&y, p)?;
                let m = block_stats(&y, p)?.mean;
                p.indices()
                    .map(|(c, i, j)| (lp[[c, i * p.block_height(), j * p.block_width()]] - m[[c, i, j]]).abs())
                    .fold(0.0, f64::max)
            };
            Ok(Case::new(format!("t={t}"), format!("max |z| <= {LOWPASS_SE_BAND}"))
                .stat("max_abs_z", worst)
                .stat("filter_residual", phi_check)
                .verdict(worst <= LOWPASS_SE_BAND && phi_check < 1e-12))
        })
        .collect::<Result<_>>()?;
    let mut report = SuiteReport::new("lowpass", seed)
        .param("t_grid", t_grid)
        .param("n", n)
        .param("blocks", p.blocks());
    report.cases = cells;
    Ok(report)
}

pub const RECONSTRUCTION_TOL: f64 = 1e-12;
pub const ORTHOGONALITY_TOL: f64 = 1e-12;
pub const POSITION_NORMAL_TOL: f64 = 1e-9;

/// Exactness of `s = s_r + s_d` at random points of `m`.
pub fn decomposition_suite(score: &dyn ScoreModel, m: &MomentManifold, n: usize, seed: u64) -> Result<SuiteReport> {
    if n == 0 {
        return Err(Error::Empty("decomposition samples"));
    }
    let mut rng = cell_rng(seed, 0);
    let (mut recon, mut ortho, mut pos) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n {
        let x = badain_project(&standard_normal(m.partition.shape(), &mut rng), m)?;
        let s = score.score(&x, m.t)?;
        let frame = NormalFrame::at(&x, &m.partition)?;
        let (s_r, s_d) = frame.decompose(&s)?;
        let sn = norm(&s);
        if sn > 0.0 {
            recon = recon.max(norm(&(&s - &(&s_r + &s_d))) / sn);
        }
        let denom = norm(&s_r) * norm(&s_d);
        if denom > 0.0 {
            ortho = ortho.max(dot(&s_r, &s_d).abs() / denom);
        }
        pos = pos.max(norm(&frame.tangent_part(&x)?) / norm(&x));
    }
    let mut report = SuiteReport::new("decomposition", seed)
        .param("n", n)
        .param("t", m.t)
        .param("blocks", m.partition.blocks());
    report.cases.push(
        Case::new("reconstruction", format!("max |s - (s_r + s_d)| / |s| <= {RECONSTRUCTION_TOL:e}"))
            .stat("max_rel_error", recon)
            .verdict(recon <= RECONSTRUCTION_TOL),
    );
    report.cases.push(
        Case::new("orthogonality", format!("max |<s_r, s_d>| / (|s_r| |s_d|) <= {ORTHOGONALITY_TOL:e}"))
            .stat("max_rel_inner", ortho)
            .verdict(ortho <= ORTHOGONALITY_TOL),
    );
    report.cases.push(
        Case::new("position is normal", format!("max |P_T x| / |x| <= {POSITION_NORMAL_TOL:e}"))
            .stat("max_rel_tangent", pos)
            .verdict(pos <= POSITION_NORMAL_TOL),
    );
    Ok(report)
}

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_RADIUS: usize = 5;
pub const SSIM_RANGE: f64 = 2.0;

fn gaussian_taps() -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|x| (-0.5 * (x * x) as f64 / (SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Half-sample symmetric index (`d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

fn blur(plane: &ndarray::Array2<f64>, taps: &[f64]) -> ndarray::Array2<f64> {
    let (h, w) = plane.dim();
    let r = SSIM_RADIUS as isize;
    let mut tmp = ndarray::Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[[reflect(y as isize + k as isize - r, h), x]])
                .sum();
        }
    }
    let mut out = ndarray::Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[[y, reflect(x as isize + k as isize - r, w)]])
                .sum();
        }
    }
    out
}

/// Gaussian-window SSIM (11 taps, sigma 1.5, reflected borders,
/// population covariances, dynamic range 2), averaged over the interior
/// `radius`-cropped map and then over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_shape(a, b)?;
    let (c, h, w) = a.dim();
    if h <= 2 * SSIM_RADIUS || w <= 2 * SSIM_RADIUS {
        return Err(Error::Config(format!(
            "SSIM needs images larger than {0}x{0}",
            2 * SSIM_RADIUS
        )));
    }
    let taps = gaussian_taps();
    let c1 = (0.01 * SSIM_RANGE).powi(2);
    let c2 = (0.03 * SSIM_RANGE).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let x = a.index_axis(ndarray::Axis(0), ch).to_owned();
        let y = b.index_axis(ndarray::Axis(0), ch).to_owned();
        let ux = blur(&x, &taps);
        let uy = blur(&y, &taps);
        let uxx = blur(&(&x * &x), &taps);
        let uyy = blur(&(&y * &y), &taps);
        let uxy = blur(&(&x * &y), &taps);
        let mut acc = 0.0;
        let mut count = 0usize;
        for i in SSIM_RADIUS..h - SSIM_RADIUS {
            for j in SSIM_RADIUS..w - SSIM_RADIUS {
                let (mx, my) = (ux[[i, j]], uy[[i, j]]);
                let vx = uxx[[i, j]] - mx * mx;
                let vy = uyy[[i, j]] - my * my;
                let vxy = uxy[[i, j]] - mx * my;
                let num = (2.0 * mx * my + c1) * (2.0 * vxy + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                acc += num / den;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / c as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub t: usize,
    pub chains: usize,
    pub sr_mean: f64,
    pub sr_std: f64,
    pub normal_mean: f64,
    pub normal_std: f64,
    pub drift_tangent_mean: f64,
    pub drift_normal_mean: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v.sqrt())
}

/// Per-step means and standard deviations of the guidance norms, across
/// chains, in decreasing `t`.
pub fn trace_norm_profile(chains: &[Vec<StepTrace>]) -> Result<Vec<ProfileRow>> {
    let mut by_t: BTreeMap<usize, Vec<&StepTrace>> = BTreeMap::new();
    for tr in chains.iter().flatten() {
        by_t.entry(tr.t).or_default().push(tr);
    }
    if by_t.is_empty() {
        return Err(Error::Empty("traces"));
    }
    Ok(by_t
        .into_iter()
        .rev()
        .map(|(t, rows)| {
            let col = |f: fn(&StepTrace) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (sr_mean, sr_std) = mean_std(&col(|r| r.sr_norm));
            let (normal_mean, normal_std) = mean_std(&col(|r| r.normal_norm));
            ProfileRow {
                t,
                chains: rows.len(),
                sr_mean,
                sr_std,
                normal_mean,
                normal_std,
                drift_tangent_mean: mean_std(&col(|r| r.drift_tangent_norm)).0,
                drift_normal_mean: mean_std(&col(|r| r.drift_normal_norm)).0,
            }
        })
        .collect())
}

/// Sample-variance helper shared by suites and callers.
pub fn sample_mean_var(xs: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let (mut n, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);
    for x in xs {
        n += 1;
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
    }
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    (mean, var, n)
}
