//! Run configuration: JSON file form, dotted-path overrides, and the
//! builders that turn it into sampler components.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use sddm_core::energy::{BadainFeatureEnergy, Energy, FeatureExtractor};
use sddm_core::sampler::{EpsPolicy, SamplerConfig};
use sddm_core::schedule::Schedule;
use sddm_core::scores::{gaussian_score, kde_score, BridgeScore, Endpoint, GaussianDomain, ScoreModel};
use sddm_core::Image;

use crate::error::CliError;
use crate::image_io::read_png;

pub const BRIDGE_ENV: &str = "SDDM_BRIDGE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub sampler: SamplerSection,
    pub score: ScoreConfig,
    pub energies: Vec<EnergyConfig>,
    pub moo: MooConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            sampler: SamplerSection::default(),
            score: ScoreConfig::default(),
            energies: vec![EnergyConfig::default()],
            moo: MooConfig::default(),
            io: IoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    /// Length of the linear schedule that is respaced down to `T`.
    pub base_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            base_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    #[serde(rename = "T0_frac")]
    pub t0_frac: f64,
    pub lambda: f64,
    pub lambdas: Vec<f64>,
    #[serde(rename = "blocks_N")]
    pub blocks: usize,
    pub eps_policy: EpsPolicy,
    pub p3_extra_iters: usize,
    pub seed: u64,
    pub sigma_min: f64,
    pub chains: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            t0_frac: 0.5,
            lambda: d.lambda,
            lambdas: d.lambdas,
            blocks: d.blocks,
            eps_policy: d.eps_policy,
            p3_extra_iters: d.p3_extra_iters,
            seed: d.seed,
            sigma_min: d.sigma_min,
            chains: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreConfig {
    /// Pixelwise `N(mean, var)` data.
    Gaussian {
        #[serde(default)]
        mean: f64,
        #[serde(default = "default_var")]
        var: f64,
    },
    /// Empirical distribution of a set of PNG images.
    Kde { points: Vec<PathBuf> },
    Bridge { endpoint: String },
}

fn default_var() -> f64 {
    0.5
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig::Gaussian {
            mean: 0.0,
            var: default_var(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnergyConfig {
    BadainFeature {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights_path: Option<PathBuf>,
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default = "default_kernel")]
        k: usize,
    },
}

fn default_channels() -> usize {
    8
}

fn default_kernel() -> usize {
    3
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig::BadainFeature {
            seed: Some(42),
            weights_path: None,
            channels: default_channels(),
            k: default_kernel(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MooConfig {
    pub enabled: bool,
}

impl Default for MooConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ref_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report_path: Option<PathBuf>,
}

/// Applies `key.path=value` to a JSON document. The value is parsed as
/// JSON when possible and taken as a string otherwise; numeric path
/// segments index arrays.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::config(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| CliError::config(format!("{key}: {part:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::config(format!("{key}: index {idx} out of range ({len} items)")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::config(format!("{key}: {part:?} is not inside an object"))),
        };
    }
    unreachable!("loop returns on the last segment")
}

impl RunConfig {
    /// Parses a JSON document; unknown keys are rejected.
    pub fn from_json_str(s: &str) -> Result<Self, CliError> {
        Self::from_value(serde_json::from_str(s).map_err(|e| CliError::config(format!("config is not JSON: {e}")))?)
    }

    pub fn from_value(v: Value) -> Result<Self, CliError> {
        serde_json::from_value(v).map_err(|e| CliError::config(format!("invalid config: {e}")))
    }

    /// Reads an optional config file and applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::io(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::config(format!("{} is not JSON: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg = Self::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn t0(&self) -> usize {
        (self.sampler.t0_frac * self.schedule.steps as f64).floor() as usize
    }

    /// Value checks, plus existence of every referenced input file other
    /// than the reference image.
    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.schedule;
        if s.steps == 0 || s.base_steps < s.steps {
            return Err(CliError::config(format!(
                "schedule needs 1 <= T <= base_steps, got T={} base_steps={}",
                s.steps, s.base_steps
            )));
        }
        let f = self.sampler.t0_frac;
        if !(f > 0.0 && f <= 1.0) {
            return Err(CliError::config(format!("T0_frac {f} must lie in (0, 1]")));
        }
        if self.t0() < 1 {
            return Err(CliError::config(format!("T0_frac {f} rounds T0 down to 0")));
        }
        if self.sampler.chains == 0 {
            return Err(CliError::config("sampler.chains must be positive"));
        }
        if self.sampler.lambdas.len() != self.energies.len() {
            return Err(CliError::config(format!(
                "{} energies but {} entries in sampler.lambdas",
                self.energies.len(),
                self.sampler.lambdas.len()
            )));
        }
        match &self.score {
            ScoreConfig::Gaussian { var, mean } => {
                if !(*var > 0.0 && var.is_finite() && mean.is_finite()) {
                    return Err(CliError::config("gaussian score needs finite mean and positive var"));
                }
            }
            ScoreConfig::Kde { points } => {
                if points.is_empty() {
                    return Err(CliError::config("kde score needs at least one point"));
                }
                for p in points {
                    require_file(p)?;
                }
            }
            ScoreConfig::Bridge { endpoint } => {
                endpoint
                    .parse::<Endpoint>()
                    .map_err(|e| CliError::config(format!("score.endpoint: {e}")))?;
            }
        }
        for e in &self.energies {
            let EnergyConfig::BadainFeature {
                seed,
                weights_path,
                channels,
                k,
            } = e;
            match (seed, weights_path) {
                (Some(_), Some(_)) => return Err(CliError::config("energy takes either seed or weights_path, not both")),
                (None, None) => return Err(CliError::config("energy needs a seed or a weights_path")),
                (None, Some(p)) => require_file(p)?,
                (Some(_), None) => {
                    if *channels == 0 || k % 2 == 0 {
                        return Err(CliError::config("energy needs channels > 0 and an odd k"));
                    }
                }
            }
        }
        self.sampler_config()
            .validate(&self.build_schedule()?)
            .map_err(CliError::from)
    }

    pub fn build_schedule(&self) -> Result<Schedule, CliError> {
        let s = &self.schedule;
        Schedule::respaced(s.base_steps, s.beta_min, s.beta_max, s.steps).map_err(CliError::from)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            t0: self.t0(),
            lambda: s.lambda,
            lambdas: s.lambdas.clone(),
            blocks: s.blocks,
            eps_policy: s.eps_policy,
            p3_extra_iters: s.p3_extra_iters,
            seed: s.seed,
            sigma_min: s.sigma_min,
            moo: self.moo.enabled,
        }
    }

    /// Score model for images shaped like `like`. Bridge endpoints are
    /// taken from `SDDM_BRIDGE` when it is set.
    pub fn build_score(&self, like: &Image, schedule: &Schedule) -> Result<Box<dyn ScoreModel>, CliError> {
        match &self.score {
            ScoreConfig::Gaussian { mean, var } => {
                let domain = GaussianDomain::new(
                    Image::from_elem(like.raw_dim(), *mean),
                    Image::from_elem(like.raw_dim(), *var),
                )?;
                Ok(Box::new(gaussian_score(domain, schedule.clone())))
            }
            ScoreConfig::Kde { points } => {
                let imgs = points
                    .iter()
                    .map(|p| read_png(p).map(|d| d.image))
                    .collect::<Result<Vec<_>, _>>()?;
                if let Some(bad) = imgs.iter().find(|i| i.raw_dim() != like.raw_dim()) {
                    return Err(CliError::config(format!(
                        "kde point of shape {:?} does not match the reference {:?}",
                        bad.dim(),
                        like.dim()
                    )));
                }
                Ok(Box::new(kde_score(imgs, schedule.clone())?))
            }
            ScoreConfig::Bridge { endpoint } => {
                let raw = std::env::var(BRIDGE_ENV).unwrap_or_else(|_| endpoint.clone());
                let ep: Endpoint = raw
                    .parse()
                    .map_err(|e| CliError::config(format!("bridge endpoint {raw:?}: {e}")))?;
                Ok(Box::new(BridgeScore::connect(&ep, Some(schedule))?))
            }
        }
    }

    pub fn build_energies(&self, in_channels: usize, schedule: &Schedule) -> Result<Vec<Box<dyn Energy>>, CliError> {
        self.energies
            .iter()
            .map(|e| {
                let EnergyConfig::BadainFeature {
                    seed,
                    weights_path,
                    channels,
                    k,
                } = e;
                let fe = match (seed, weights_path) {
                    (_, Some(p)) => {
                        let fe = FeatureExtractor::load(p)?;
                        if fe.in_channels() != in_channels {
                            return Err(CliError::config(format!(
                                "{} expects {} input channels, image has {in_channels}",
                                p.display(),
                                fe.in_channels()
                            )));
                        }
                        fe
                    }
                    (Some(s), None) => FeatureExtractor::from_seed(*s, *channels, in_channels, *k)?,
                    (None, None) => return Err(CliError::config("energy needs a seed or a weights_path")),
                };
                let energy = BadainFeatureEnergy::new(fe, self.sampler.blocks, schedule.clone())
                    .with_sigma_min(self.sampler.sigma_min);
                Ok(Box::new(energy) as Box<dyn Energy>)
            })
            .collect()
    }
}

fn require_file(p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::config(format!("referenced file {} does not exist", p.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_settings() {
        let c = RunConfig::default();
        assert_eq!(c.schedule.steps, 100);
        assert_eq!(c.t0(), 50);
        assert_eq!(c.sampler.lambda, 2.0);
        assert_eq!(c.sampler.lambdas, vec![25.0]);
        assert_eq!(c.sampler.blocks, 16);
        assert_eq!(c.sampler.eps_policy, EpsPolicy::P3);
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json_str("{}").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json_str(r#"{"sampler":{"lambada":3}}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"extra":1}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"score":{"kind":"gaussian","sigma":1}}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"score":{"kind":"flow"}}"#).is_err());
    }

    #[test]
    fn overrides() {
        let mut doc = RunConfig::default().to_value();
        apply_override(&mut doc, "sampler.lambda=3").unwrap();
        apply_override(&mut doc, "sampler.eps_policy=P1").unwrap();
        apply_override(&mut doc, "energies.0.seed=7").unwrap();
        apply_override(&mut doc, "io.out_path=o.png").unwrap();
        let c = RunConfig::from_value(doc.clone()).unwrap();
        assert_eq!(c.sampler.lambda, 3.0);
        assert_eq!(c.sampler.eps_policy, EpsPolicy::P1);
        assert_eq!(c.io.out_path, Some(PathBuf::from("o.png")));
        assert!(matches!(c.energies[0], EnergyConfig::BadainFeature { seed: Some(7), .. }));
        assert!(apply_override(&mut doc, "noequals").is_err());
        assert!(apply_override(&mut doc, "a..b=1").is_err());
        assert!(apply_override(&mut doc, "energies.5.seed=1").is_err());
        assert!(apply_override(&mut doc, "sampler.lambda.x=1").is_err());
        let mut empty = Value::Object(Default::default());
        apply_override(&mut empty, "sampler.blocks_N=8").unwrap();
        assert_eq!(RunConfig::from_value(empty).unwrap().sampler.blocks, 8);
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        c.sampler.lambdas = vec![];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.sampler.t0_frac = 0.001;
        assert!(c.validate().is_err());
        let c = RunConfig {
            energies: vec![EnergyConfig::BadainFeature {
                seed: None,
                weights_path: Some("/nonexistent/w.bin".into()),
                channels: 8,
                k: 3,
            }],
            ..RunConfig::default()
        };
        let err = c.validate().unwrap_err();
        assert!(err.message.contains("/nonexistent/w.bin"));
        let c = RunConfig {
            score: ScoreConfig::Bridge {
                endpoint: "nowhere".into(),
            },
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
