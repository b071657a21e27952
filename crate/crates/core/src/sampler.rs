//! Score-decomposed sampling: on-manifold multi-objective refinement,
//! normal-space transfer to the adjacent manifold, unconditional tail,
//! and the low-pass (ILVR) baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::Energy;
use crate::error::{Error, Result};
use crate::manifold::{
    badain_project_floored, block_stats, low_pass_filter, manifold_at, BlockPartition, BlockStats,
    MomentManifold, NormalFrame, DEFAULT_SIGMA_MIN,
};
use crate::moo::{min_norm, normalize_guidances};
use crate::schedule::{ancestral_step, perturb, Schedule};
use crate::scores::ScoreModel;
use crate::tensor::{dot, norm, norm_sq, standard_normal, Image};

/// Below this squared norm the min-norm direction counts as zero.
pub const PARETO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EpsPolicy {
    P1,
    P2,
    P3,
}

impl std::str::FromStr for EpsPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P1" | "p1" | "1" => Ok(Self::P1),
            "P2" | "p2" | "2" => Ok(Self::P2),
            "P3" | "p3" | "3" => Ok(Self::P3),
            _ => Err(Error::Config(format!("unknown eps policy {s:?}"))),
        }
    }
}

/// Refinement iterations per guided step.
pub fn epsilon_policy_iters(policy: EpsPolicy, t: usize, t0: usize, p3_extra_iters: usize) -> usize {
    match policy {
        EpsPolicy::P1 => 1,
        EpsPolicy::P2 => 2,
        EpsPolicy::P3 if t == t0 => 1 + p3_extra_iters,
        EpsPolicy::P3 => 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Last guided step; steps `t0..=T` are guided.
    pub t0: usize,
    pub lambda: f64,
    pub lambdas: Vec<f64>,
    pub blocks: usize,
    pub eps_policy: EpsPolicy,
    pub p3_extra_iters: usize,
    pub seed: u64,
    pub sigma_min: f64,
    /// `false` replaces the min-norm combination by the plain sum.
    pub moo: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            t0: 50,
            lambda: 2.0,
            lambdas: vec![25.0],
            blocks: 16,
            eps_policy: EpsPolicy::P3,
            p3_extra_iters: 4,
            seed: 0,
            sigma_min: DEFAULT_SIGMA_MIN,
            moo: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        let steps = schedule.steps();
        if self.t0 < 1 || self.t0 > steps {
            return Err(Error::Config(format!("T0 = {} must lie in [1, {steps}]", self.t0)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("step size {} must be positive", self.lambda)));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("energy weight {l} must be positive")));
        }
        if self.blocks == 0 {
            return Err(Error::Config("block count must be positive".into()));
        }
        if self.sigma_min.is_nan() || self.sigma_min <= 0.0 {
            return Err(Error::Config("sigma_min must be positive".into()));
        }
        Ok(())
    }

    /// Independent random stream for chain `chain`.
    pub fn chain_rng(&self, chain: u64) -> ChaCha8Rng {
        chain_rng(self.seed, chain)
    }
}

pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

/// Diagnostics of one guided step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub iterations: usize,
    /// `|s_r|` and `|s_d|` of the score at `x_t`.
    pub sr_norm: f64,
    pub normal_norm: f64,
    /// Tangent and normal norms of the reverse drift `f - g^2 s` at `x_t`.
    pub drift_tangent_norm: f64,
    pub drift_normal_norm: f64,
    pub moo_sq_norm: f64,
    pub alpha: f64,
    pub betas: Vec<f64>,
    pub pni_flag: bool,
    pub energies: Vec<f64>,
}

/// Result of the on-manifold refinement at one time step.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub x: Image,
    pub trace: StepTrace,
    /// Score at the input point.
    pub start_score: Image,
    /// Score at the returned point, when the last evaluation happened there.
    pub end_score: Option<Image>,
}

fn eval_score(score: &dyn ScoreModel, x: &Image, t: usize) -> Result<Image> {
    let s = score.score(x, t).map_err(|e| Error::ScoreAtStep {
        t,
        source: Box::new(e),
    })?;
    if s.raw_dim() != x.raw_dim() {
        return Err(Error::ScoreAtStep {
            t,
            source: Box::new(Error::Shape {
                expected: crate::tensor::shape_of(x),
                actual: crate::tensor::shape_of(&s),
            }),
        });
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score at step {t}")));
    }
    Ok(s)
}

/// Refines `x_t` on `M_t` for `iters` iterations: tangent score and
/// tangent energy gradients are combined into one direction `d` and the
/// point moves to `R(x + lambda * d)`.
#[allow(clippy::too_many_arguments)]
pub fn optimize_on_manifold(
    x_t: &Image,
    m: &MomentManifold,
    score: &dyn ScoreModel,
    energies: &[&dyn Energy],
    y0: &Image,
    cfg: &SamplerConfig,
    schedule: &Schedule,
    iters: usize,
) -> Result<Refinement> {
    if energies.len() != cfg.lambdas.len() {
        return Err(Error::Config(format!(
            "{} energies but {} energy weights",
            energies.len(),
            cfg.lambdas.len()
        )));
    }
    m.check_contains(x_t)?;
    let t = m.t;
    let beta = schedule.beta(t);
    let mut x = x_t.clone();
    let mut trace = StepTrace {
        t,
        iterations: 0,
        sr_norm: 0.0,
        normal_norm: 0.0,
        drift_tangent_norm: 0.0,
        drift_normal_norm: 0.0,
        moo_sq_norm: 0.0,
        alpha: 1.0,
        betas: vec![0.0; energies.len()],
        pni_flag: false,
        energies: vec![0.0; energies.len()],
    };
    let mut start_score = None;
    let mut end_score = None;
    for it in 0..iters {
        let s = eval_score(score, &x, t)?;
        let frame = NormalFrame::at(&x, &m.partition)?;
        let (s_r, s_d) = frame.decompose(&s)?;
        if it == 0 {
            trace.sr_norm = norm(&s_r);
            trace.normal_norm = norm(&s_d);
            // drift f - g^2 s = -beta/2 x - beta s; x itself is normal
            let drift = -(&x * (0.5 * beta)) - &s * beta;
            let (dt, dn) = frame.decompose(&drift)?;
            trace.drift_tangent_norm = norm(&dt);
            trace.drift_normal_norm = norm(&dn);
        }
        let mut grads = Vec::with_capacity(energies.len());
        for (k, e) in energies.iter().enumerate() {
            trace.energies[k] = e.value(&x, y0, t)?;
            grads.push(frame.tangent_part(&e.gradient(&x, y0, t)?)?);
        }
        let scaled = normalize_guidances(&s_r, &grads, &cfg.lambdas)?;
        let opposing: Vec<(usize, Image)> = scaled
            .into_iter()
            .enumerate()
            .filter_map(|(k, g)| g.map(|g| (k, -g)))
            .collect();
        let (direction, sq_norm) = if cfg.moo {
            let mut vs: Vec<&Image> = vec![&s_r];
            vs.extend(opposing.iter().map(|(_, g)| g));
            let sol = min_norm(&vs)?;
            trace.alpha = sol.alpha();
            trace.betas.fill(0.0);
            for ((k, _), b) in opposing.iter().zip(sol.betas()) {
                trace.betas[*k] = *b;
            }
            (sol.direction, sol.sq_norm)
        } else {
            let mut d = s_r.clone();
            for (_, g) in &opposing {
                d += g;
            }
            let sq = norm_sq(&d);
            (d, sq)
        };
        trace.moo_sq_norm = sq_norm;
        if it == 0 {
            start_score = Some(s.clone());
        }
        if !sq_norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite guidance at step {t}")));
        }
        if sq_norm < PARETO_TOL {
            end_score = Some(s);
            break;
        }
        trace.iterations += 1;
        let update = direction * cfg.lambda;
        if dot(&update, &s_r) < 0.0 {
            trace.pni_flag = true;
        }
        x = badain_project_floored(&(x + &update), m, cfg.sigma_min)?;
    }
    let start_score = match start_score {
        Some(s) => s,
        None => eval_score(score, x_t, t)?,
    };
    Ok(Refinement {
        x,
        trace,
        start_score,
        end_score,
    })
}

/// Normal-space ancestral update from `M_t` onto `M_{t-1}`:
/// `R_{t-1}(x* + P_N(delta))`, with `delta` the ancestral increment
/// driven by the normal score `s_d`.
#[allow(clippy::too_many_arguments)]
pub fn transfer_step<R: Rng + ?Sized>(
    x_star: &Image,
    m_t: &MomentManifold,
    m_prev: &MomentManifold,
    score_at_x: &Image,
    schedule: &Schedule,
    rng: &mut R,
    add_noise: bool,
    sigma_min: f64,
) -> Result<Image> {
    let t = m_t.t;
    schedule.check_time(t, 1)?;
    if m_prev.t + 1 != t {
        return Err(Error::Config(format!(
            "transfer from M_{t} must target M_{}, got M_{}",
            t - 1,
            m_prev.t
        )));
    }
    m_t.check_contains(x_star)?;
    let frame = NormalFrame::at(x_star, &m_t.partition)?;
    let s_d = frame.normal_part(score_at_x)?;
    let stepped = ancestral_step(schedule, x_star, t, &s_d, rng, add_noise)?;
    let delta = frame.normal_part(&(stepped - x_star))?;
    badain_project_floored(&(x_star + &delta), m_prev, sigma_min)
}

/// Output of a chain: the final image and the per-step guided traces.
#[derive(Debug, Clone)]
pub struct Generation {
    pub x: Image,
    pub traces: Vec<StepTrace>,
}

/// The full score-decomposed sampler.
pub struct Sddm<'a> {
    schedule: &'a Schedule,
    score: &'a dyn ScoreModel,
    energies: Vec<&'a dyn Energy>,
    cfg: SamplerConfig,
}

impl<'a> Sddm<'a> {
    pub fn new(
        schedule: &'a Schedule,
        score: &'a dyn ScoreModel,
        energies: Vec<&'a dyn Energy>,
        cfg: SamplerConfig,
    ) -> Result<Self> {
        cfg.validate(schedule)?;
        if energies.len() != cfg.lambdas.len() {
            return Err(Error::Config(format!(
                "{} energies but {} energy weights",
                energies.len(),
                cfg.lambdas.len()
            )));
        }
        Ok(Self {
            schedule,
            score,
            energies,
            cfg,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    fn setup(&self, y0: &Image) -> Result<(BlockPartition, BlockStats)> {
        let p = BlockPartition::for_image(y0, self.cfg.blocks)?;
        let stats = block_stats(y0, &p)?;
        Ok((p, stats))
    }

    /// Standard normal draw restricted onto `M_T`.
    pub fn init<R: Rng + ?Sized>(&self, y0: &Image, rng: &mut R) -> Result<Image> {
        let (p, stats) = self.setup(y0)?;
        let m = manifold_at(&stats, self.schedule, self.schedule.steps(), &p)?;
        let z = standard_normal(crate::tensor::shape_of(y0), rng);
        badain_project_floored(&z, &m, self.cfg.sigma_min)
    }

    /// One guided step from `x_t` on `M_t` to `x_{t-1}` on `M_{t-1}`.
    pub fn guided_step<R: Rng + ?Sized>(
        &self,
        x_t: &Image,
        y0: &Image,
        t: usize,
        rng: &mut R,
    ) -> Result<(Image, StepTrace)> {
        self.schedule.check_time(t, 1)?;
        let (p, stats) = self.setup(y0)?;
        let m_t = manifold_at(&stats, self.schedule, t, &p)?;
        let m_prev = manifold_at(&stats, self.schedule, t - 1, &p)?;
        let iters = epsilon_policy_iters(self.cfg.eps_policy, t, self.cfg.t0, self.cfg.p3_extra_iters);
        let r = optimize_on_manifold(
            x_t,
            &m_t,
            self.score,
            &self.energies,
            y0,
            &self.cfg,
            self.schedule,
            iters,
        )?;
        let s = if iters == 1 {
            r.start_score
        } else {
            match r.end_score {
                Some(s) => s,
                None => eval_score(self.score, &r.x, t)?,
            }
        };
        let x = transfer_step(&r.x, &m_t, &m_prev, &s, self.schedule, rng, true, self.cfg.sigma_min)?;
        Ok((x, r.trace))
    }

    pub fn unconditional_step<R: Rng + ?Sized>(&self, x: &Image, t: usize, rng: &mut R) -> Result<Image> {
        let s = eval_score(self.score, x, t)?;
        ancestral_step(self.schedule, x, t, &s, rng, true)
    }

    /// Runs the chain down to `x_until` (`until = 0` gives the final sample).
    pub fn generate_until<R: Rng + ?Sized>(&self, y0: &Image, rng: &mut R, until: usize) -> Result<Generation> {
        let steps = self.schedule.steps();
        if until > steps {
            return Err(Error::TimeRange {
                t: until,
                min: 0,
                max: steps,
            });
        }
        let mut x = self.init(y0, rng)?;
        let mut traces = Vec::new();
        for t in (until + 1..=steps).rev() {
            if t >= self.cfg.t0 {
                let (next, trace) = self.guided_step(&x, y0, t, rng)?;
                x = next;
                traces.push(trace);
            } else {
                x = self.unconditional_step(&x, t, rng)?;
            }
        }
        Ok(Generation { x, traces })
    }

    pub fn generate<R: Rng + ?Sized>(&self, y0: &Image, rng: &mut R) -> Result<Generation> {
        self.generate_until(y0, rng, 0)
    }
}

/// Low-pass guided baseline: after each ancestral step with `t >= t0`,
/// `x <- x - Phi(x) + Phi(y_{t-1})` with `y_{t-1}` drawn from the forward
/// kernel. Runs down to `x_until`.
#[allow(clippy::too_many_arguments)]
pub fn ilvr_generate_until<R: Rng + ?Sized>(
    y0: &Image,
    score: &dyn ScoreModel,
    schedule: &Schedule,
    blocks: usize,
    t0: usize,
    rng: &mut R,
    until: usize,
) -> Result<Image> {
    let steps = schedule.steps();
    if until > steps {
        return Err(Error::TimeRange {
            t: until,
            min: 0,
            max: steps,
        });
    }
    let p = BlockPartition::new(crate::tensor::shape_of(y0), blocks)?;
    let mut x = standard_normal(crate::tensor::shape_of(y0), rng);
    for t in (until + 1..=steps).rev() {
        let s = eval_score(score, &x, t)?;
        x = ancestral_step(schedule, &x, t, &s, rng, true)?;
        if t >= t0 {
            let y = if t == 1 { y0.clone() } else { perturb(schedule, y0, t - 1, rng)? };
            x = x.clone() - low_pass_filter(&x, &p)? + low_pass_filter(&y, &p)?;
        }
    }
    Ok(x)
}

pub fn ilvr_generate<R: Rng + ?Sized>(
    y0: &Image,
    score: &dyn ScoreModel,
    schedule: &Schedule,
    blocks: usize,
    t0: usize,
    rng: &mut R,
) -> Result<Image> {
    ilvr_generate_until(y0, score, schedule, blocks, t0, rng, 0)
}

/// Fraction of guided steps whose applied update opposed the tangent score.
pub fn pni(traces: &[StepTrace]) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::Empty("traces"));
    }
    Ok(traces.iter().filter(|t| t.pni_flag).count() as f64 / traces.len() as f64)
}
