use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::json;

use sddm_core::energy::Energy;
use sddm_core::sampler::{ilvr_generate, pni, Sddm, StepTrace};
use sddm_core::verify::ssim;
use sddm_core::Image;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::image_io::{read_png, write_png};
use crate::suites::{run_one, Suite};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct CommonOpts {
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub ref_path: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Config file, then `--set` overrides, then the dedicated flags.
pub fn effective_config(opts: &CommonOpts, extra: &[String]) -> Result<RunConfig, CliError> {
    let mut sets = opts.set.clone();
    sets.extend_from_slice(extra);
    let mut cfg = RunConfig::load(opts.config.as_deref(), &sets)?;
    if let Some(seed) = opts.seed {
        cfg.sampler.seed = seed;
    }
    if let Some(p) = &opts.ref_path {
        cfg.io.ref_path = Some(p.clone());
    }
    if let Some(p) = &opts.out {
        cfg.io.out_path = Some(p.clone());
    }
    if let Some(p) = &opts.report {
        cfg.io.report_path = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn reference(cfg: &RunConfig) -> Result<Image, CliError> {
    let path = cfg
        .io
        .ref_path
        .as_deref()
        .ok_or_else(|| CliError::config("no reference image (use --ref or io.ref_path)"))?;
    Ok(read_png(path)?.image)
}

fn out_path(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.io
        .out_path
        .clone()
        .ok_or_else(|| CliError::config("no output path (use --out or io.out_path)"))
}

fn chain_path(out: &Path, chain: usize) -> PathBuf {
    if chain == 0 {
        return out.to_path_buf();
    }
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "png".into());
    out.with_file_name(format!("{stem}_{chain}.{ext}"))
}

pub fn trace_path(out: &Path) -> PathBuf {
    out.with_extension("trace.csv")
}

pub fn summary_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.io
        .report_path
        .clone()
        .unwrap_or_else(|| out.with_extension("summary.json"))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outputs: Vec<Image>,
    pub traces: Vec<Vec<StepTrace>>,
    pub ssim: Vec<f64>,
    pub pni: Option<f64>,
    pub runtime_s: f64,
}

impl RunResult {
    pub fn ssim_mean(&self) -> f64 {
        self.ssim.iter().sum::<f64>() / self.ssim.len() as f64
    }
}

/// Runs `sampler.chains` independent chains; chain `k` uses stream `k`
/// of the configured seed.
pub fn run_sddm(cfg: &RunConfig, y0: &Image) -> Result<RunResult, CliError> {
    let started = Instant::now();
    let schedule = cfg.build_schedule()?;
    let sampler_cfg = cfg.sampler_config();
    let chains: Vec<(Image, Vec<StepTrace>)> = (0..cfg.sampler.chains)
        .into_par_iter()
        .map(|chain| -> Result<_, CliError> {
            let score = cfg.build_score(y0, &schedule)?;
            let energies = cfg.build_energies(y0.dim().0, &schedule)?;
            let refs: Vec<&dyn Energy> = energies.iter().map(|e| e.as_ref()).collect();
            let sampler = Sddm::new(&schedule, score.as_ref(), refs, sampler_cfg.clone())?;
            let g = sampler.generate(y0, &mut sampler_cfg.chain_rng(chain as u64))?;
            Ok((g.x, g.traces))
        })
        .collect::<Result<_, _>>()?;
    let (outputs, traces): (Vec<_>, Vec<_>) = chains.into_iter().unzip();
    let ssim = outputs.iter().map(|x| ssim(x, y0)).collect::<Result<Vec<_>, _>>()?;
    let flat: Vec<StepTrace> = traces.iter().flatten().cloned().collect();
    let pni = if flat.is_empty() { None } else { Some(pni(&flat)?) };
    Ok(RunResult {
        outputs,
        traces,
        ssim,
        pni,
        runtime_s: started.elapsed().as_secs_f64(),
    })
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(";")
}

/// Per-step trace table, preceded by a `# config:` comment line.
pub fn trace_csv(config_json: &str, traces: &[Vec<StepTrace>]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| CliError::io(format!("trace CSV: {e}"));
    w.write_record([
        "chain",
        "t",
        "iterations",
        "sr_norm",
        "normal_norm",
        "drift_tangent_norm",
        "drift_normal_norm",
        "moo_sq_norm",
        "alpha",
        "betas",
        "pni_flag",
        "energies",
    ])
    .map_err(to_err)?;
    for (chain, rows) in traces.iter().enumerate() {
        for r in rows {
            w.write_record([
                chain.to_string(),
                r.t.to_string(),
                r.iterations.to_string(),
                format!("{:e}", r.sr_norm),
                format!("{:e}", r.normal_norm),
                format!("{:e}", r.drift_tangent_norm),
                format!("{:e}", r.drift_normal_norm),
                format!("{:e}", r.moo_sq_norm),
                format!("{:e}", r.alpha),
                join(&r.betas),
                r.pni_flag.to_string(),
                join(&r.energies),
            ])
            .map_err(to_err)?;
        }
    }
    let body = w.into_inner().map_err(|e| CliError::io(format!("trace CSV: {e}")))?;
    Ok(format!("# config: {config_json}\n{}", String::from_utf8(body).expect("CSV is UTF-8")))
}

pub fn translate(opts: &CommonOpts) -> Result<(), CliError> {
    let cfg = effective_config(opts, &[])?;
    let out = out_path(&cfg)?;
    let y0 = reference(&cfg)?;
    let r = run_sddm(&cfg, &y0)?;
    let cfg_json = cfg.to_json();
    let mut written = Vec::new();
    for (k, x) in r.outputs.iter().enumerate() {
        let p = chain_path(&out, k);
        write_png(&p, x, Some(&cfg_json))?;
        written.push(p.display().to_string());
    }
    let tpath = trace_path(&out);
    write_text(&tpath, &trace_csv(&cfg_json, &r.traces)?)?;
    let summary = json!({
        "command": "translate",
        "config": cfg.to_value(),
        "schedule_fingerprint": cfg.build_schedule()?.fingerprint(),
        "chains": r.outputs.len(),
        "outputs": written,
        "trace_path": tpath.display().to_string(),
        "ssim": r.ssim,
        "ssim_mean": r.ssim_mean(),
        "pni": r.pni,
        "timing": { "runtime_s": r.runtime_s },
    });
    let spath = summary_path(&cfg, &out);
    write_text(&spath, &serde_json::to_string_pretty(&summary).expect("summary serialises"))?;
    log::info!("wrote {} image(s), {}, {}", written.len(), tpath.display(), spath.display());
    Ok(())
}

pub fn ilvr(opts: &CommonOpts) -> Result<(), CliError> {
    let cfg = effective_config(opts, &[])?;
    let out = out_path(&cfg)?;
    let y0 = reference(&cfg)?;
    let started = Instant::now();
    let schedule = cfg.build_schedule()?;
    let sc = cfg.sampler_config();
    let outputs: Vec<Image> = (0..cfg.sampler.chains)
        .into_par_iter()
        .map(|chain| -> Result<Image, CliError> {
            let score = cfg.build_score(&y0, &schedule)?;
            Ok(ilvr_generate(&y0, score.as_ref(), &schedule, sc.blocks, sc.t0, &mut sc.chain_rng(chain as u64))?)
        })
        .collect::<Result<_, _>>()?;
    let cfg_json = cfg.to_json();
    let mut written = Vec::new();
    let mut scores = Vec::new();
    for (k, x) in outputs.iter().enumerate() {
        let p = chain_path(&out, k);
        write_png(&p, x, Some(&cfg_json))?;
        written.push(p.display().to_string());
        scores.push(ssim(x, &y0)?);
    }
    let summary = json!({
        "command": "ilvr",
        "config": cfg.to_value(),
        "schedule_fingerprint": schedule.fingerprint(),
        "chains": outputs.len(),
        "outputs": written,
        "ssim": scores,
        "ssim_mean": scores.iter().sum::<f64>() / scores.len() as f64,
        "timing": { "runtime_s": started.elapsed().as_secs_f64() },
    });
    write_text(
        &summary_path(&cfg, &out),
        &serde_json::to_string_pretty(&summary).expect("summary serialises"),
    )
}

pub fn verify(opts: &CommonOpts, suite: Suite) -> Result<(), CliError> {
    let cfg = effective_config(opts, &[])?;
    let schedule = cfg.build_schedule()?;
    let report = run_one(suite, &schedule, cfg.sampler.seed)?;
    print!("{}", report.to_text());
    if let Some(p) = &cfg.io.report_path {
        let mut doc = serde_json::to_value(&report).expect("report serialises");
        doc["config"] = cfg.to_value();
        write_text(p, &serde_json::to_string_pretty(&doc).expect("report serialises"))?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::gate("one or more verification gates failed"))
    }
}

/// `KEY=V1,V2,...` into the key and its values.
pub fn parse_sweep(s: &str) -> Result<(String, Vec<String>), CliError> {
    let (key, values) = s
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("sweep {s:?} is not KEY=V1,V2,...")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if key.trim().is_empty() || values.iter().any(String::is_empty) {
        return Err(CliError::config(format!("sweep {s:?} has an empty key or value")));
    }
    Ok((key.trim().to_string(), values))
}

pub fn ablate(opts: &CommonOpts, sweep: &str) -> Result<(), CliError> {
    let (key, values) = parse_sweep(sweep)?;
    let base = effective_config(opts, &[])?;
    let y0 = reference(&base)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| CliError::io(format!("ablation CSV: {e}"));
    w.write_record(["setting", "ssim", "pni", "runtime_s"]).map_err(to_err)?;
    for v in &values {
        let cfg = effective_config(opts, &[format!("{key}={v}")])?;
        let r = run_sddm(&cfg, &y0)?;
        let pni = r.pni.map(|p| p.to_string()).unwrap_or_default();
        w.write_record([
            format!("{key}={v}"),
            r.ssim_mean().to_string(),
            pni,
            format!("{:.3}", r.runtime_s),
        ])
        .map_err(to_err)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| CliError::io(e.to_string()))?).expect("CSV is UTF-8");
    let text = format!("# config: {}\n{body}", base.to_json());
    match &base.io.out_path {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
