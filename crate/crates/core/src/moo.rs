//! Min-norm element of the convex hull of a few vectors (MGDA).
//!
//! A nonzero min-norm point `d` satisfies `<d, v_i> >= |d|^2` for every
//! input, so it is a common ascent direction; a zero point means the
//! inputs are Pareto-stationary.

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, norm, norm_sq, Image};

pub const FW_MAX_ITER: usize = 100;
pub const FW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct MinNormSolution {
    /// Simplex weights, one per input vector.
    pub weights: Vec<f64>,
    pub direction: Image,
    pub sq_norm: f64,
    pub iterations: usize,
    /// Objective value before each Frank–Wolfe step and after the last one.
    pub history: Vec<f64>,
}

impl MinNormSolution {
    /// Weight on the first vector (the score, by convention).
    pub fn alpha(&self) -> f64 {
        self.weights[0]
    }

    /// Weights on the remaining vectors (the energies).
    pub fn betas(&self) -> &[f64] {
        &self.weights[1..]
    }

    fn from_weights(vs: &[&Image], weights: Vec<f64>, iterations: usize, history: Vec<f64>) -> Self {
        let mut direction = Image::zeros(vs[0].raw_dim());
        for (v, w) in vs.iter().zip(&weights) {
            if *w != 0.0 {
                axpy(&mut direction, *w, v);
            }
        }
        let sq_norm = norm_sq(&direction);
        Self {
            weights,
            direction,
            sq_norm,
            iterations,
            history,
        }
    }
}

/// `g'_i = lambda_i * |s_r| / |g_i| * g_i`. Zero gradients carry no
/// direction and come back as `None`.
pub fn normalize_guidances(s_r: &Image, grads: &[Image], lambdas: &[f64]) -> Result<Vec<Option<Image>>> {
    if grads.len() != lambdas.len() {
        return Err(Error::Config(format!(
            "{} energy gradients but {} weights",
            grads.len(),
            lambdas.len()
        )));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(Error::Config(format!("energy weight {l} must be positive")));
    }
    let sr = norm(s_r);
    grads
        .iter()
        .zip(lambdas)
        .enumerate()
        .map(|(i, (g, l))| {
            let gn = norm(g);
            if !gn.is_finite() {
                return Err(Error::Numeric(format!("energy {i} gradient is not finite")));
            }
            if gn == 0.0 {
                log::debug!("energy {i} has zero tangent gradient; dropped");
                return Ok(None);
            }
            let k = l * sr / gn;
            Ok(Some(g.mapv(|v| k * v)))
        })
        .collect()
}

/// Closed form for two vectors:
/// `lambda = clamp(<v2 - v1, v2> / |v2 - v1|^2, 0, 1)`.
pub fn min_norm_2(v1: &Image, v2: &Image) -> MinNormSolution {
    let diff = v2 - v1;
    let denom = norm_sq(&diff);
    let lambda = if denom == 0.0 {
        0.5
    } else {
        (dot(&diff, v2) / denom).clamp(0.0, 1.0)
    };
    MinNormSolution::from_weights(&[v1, v2], vec![lambda, 1.0 - lambda], 0, Vec::new())
}

/// Pairwise (away-step) Frank–Wolfe on the simplex with exact line search,
/// followed each step by an exact solve on the support when that stays
/// inside the simplex and lowers the objective.
pub fn min_norm_fw(vs: &[&Image], max_iter: usize, tol: f64) -> Result<MinNormSolution> {
    let m = vs.len();
    if m == 0 {
        return Err(Error::Empty("min-norm input"));
    }
    if m == 1 {
        return Ok(MinNormSolution::from_weights(vs, vec![1.0], 0, Vec::new()));
    }
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let g = dot(vs[i], vs[j]);
            gram[i * m + j] = g;
            gram[j * m + i] = g;
        }
    }
    let g = |i: usize, j: usize| gram[i * m + j];
    let mut w = vec![1.0 / m as f64; m];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        // gw[i] = <d, v_i>
        let gw: Vec<f64> = (0..m).map(|i| (0..m).map(|j| g(i, j) * w[j]).sum()).collect();
        let obj: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        history.push(obj);
        if iterations >= max_iter {
            break;
        }
        let s = argmin(&gw, |_| true);
        if obj - gw[s] < tol {
            break;
        }
        let a = argmax(&gw, |i| w[i] > 0.0);
        let curvature = g(s, s) - 2.0 * g(s, a) + g(a, a);
        if a == s || curvature <= 0.0 {
            break;
        }
        let step = ((gw[a] - gw[s]) / curvature).clamp(0.0, w[a]);
        if step == 0.0 {
            break;
        }
        w[s] += step;
        w[a] -= step;
        if w[a] < 1e-15 {
            w[s] += w[a];
            w[a] = 0.0;
        }
        if let Some(polished) = support_minimizer(&gram, m, &w) {
            if quad(&gram, m, &polished) < quad(&gram, m, &w) {
                w = polished;
            }
        }
        iterations += 1;
    }
    Ok(MinNormSolution::from_weights(vs, w, iterations, history))
}

fn quad(gram: &[f64], m: usize, w: &[f64]) -> f64 {
    (0..m).map(|i| w[i] * (0..m).map(|j| gram[i * m + j] * w[j]).sum::<f64>()).sum()
}

/// Minimiser of the objective on the affine hull of the current support,
/// if it lies strictly inside the simplex.
fn support_minimizer(gram: &[f64], m: usize, w: &[f64]) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..m).filter(|&i| w[i] > 0.0).collect();
    let k = support.len();
    if k < 2 {
        return None;
    }
    // [G_S 1; 1^T 0] [w; mu] = [0; 1]
    let n = k + 1;
    let mut a = vec![0.0; n * (n + 1)];
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a[r * (n + 1) + c] = gram[i * m + j];
        }
        a[r * (n + 1) + k] = 1.0;
        a[k * (n + 1) + r] = 1.0;
    }
    a[k * (n + 1) + n] = 1.0;
    let x = solve_dense(&mut a, n)?;
    if x[..k].iter().any(|v| v.is_nan() || *v <= 0.0) {
        return None;
    }
    let mut out = vec![0.0; m];
    for (r, &i) in support.iter().enumerate() {
        out[i] = x[r];
    }
    Some(out)
}

/// Gaussian elimination with partial pivoting on an `n x (n + 1)`
/// augmented matrix.
fn solve_dense(a: &mut [f64], n: usize) -> Option<Vec<f64>> {
    let w = n + 1;
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x * w + col].abs().total_cmp(&a[y * w + col].abs()))?;
        if a[piv * w + col].abs() <= 1e-12 * scale {
            return None;
        }
        for c in 0..w {
            a.swap(col * w + c, piv * w + c);
        }
        for r in 0..n {
            if r != col {
                let f = a[r * w + col] / a[col * w + col];
                for c in col..w {
                    a[r * w + c] -= f * a[col * w + c];
                }
            }
        }
    }
    let x: Vec<f64> = (0..n).map(|r| a[r * w + n] / a[r * w + r]).collect();
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Dispatches to the closed form for two vectors and Frank–Wolfe otherwise.
pub fn min_norm(vs: &[&Image]) -> Result<MinNormSolution> {
    match vs {
        [a, b] => Ok(min_norm_2(a, b)),
        _ => min_norm_fw(vs, FW_MAX_ITER, FW_TOL),
    }
}

fn argmin(xs: &[f64], keep: impl Fn(usize) -> bool) -> usize {
    let mut best = usize::MAX;
    for (i, x) in xs.iter().enumerate() {
        if keep(i) && (best == usize::MAX || *x < xs[best]) {
            best = i;
        }
    }
    best
}

fn argmax(xs: &[f64], keep: impl Fn(usize) -> bool) -> usize {
    let mut best = usize::MAX;
    for (i, x) in xs.iter().enumerate() {
        if keep(i) && (best == usize::MAX || *x > xs[best]) {
            best = i;
        }
    }
    best
}
