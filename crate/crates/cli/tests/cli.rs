use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sddm_cli::config::BRIDGE_ENV;
use sddm_cli::image_io::{decode_png, write_png};
use sddm_cli::suites::{run_one, Suite};
use sddm_core::schedule::Schedule;
use sddm_core::Image;
use serde_json::Value;
use tempfile::TempDir;

fn sddm(args: &[&str], extra: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sddm"));
    cmd.args(args).env_remove(BRIDGE_ENV);
    for p in extra {
        cmd.arg(p);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    dir: TempDir,
    reference: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = Image::from_shape_simple_fn((3, 16, 16), || rng.random_range(-1.0..1.0));
        let reference = dir.path().join("ref.png");
        write_png(&reference, &img, None).unwrap();
        Self { dir, reference }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// `translate` on the small reference with 8 blocks, plus extra args.
    fn translate(&self, out: &Path, extra: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_sddm"))
            .env_remove(BRIDGE_ENV)
            .args(["translate", "--seed", "3", "--set", "sampler.blocks_N=8"])
            .args(extra)
            .arg("--ref")
            .arg(&self.reference)
            .arg("--out")
            .arg(out)
            .output()
            .expect("binary runs")
    }
}

#[test]
fn translate_writes_image_trace_and_summary() {
    let ws = Workspace::new();
    let out = ws.path("o.png");
    let r = ws.translate(&out, &["--set", "sampler.lambda=3"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(ws.path("o.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["sampler"]["lambda"], 3.0);
    assert_eq!(summary["config"]["sampler"]["seed"], 3);
    assert_eq!(summary["chains"], 1);
    assert!(summary["ssim_mean"].as_f64().unwrap().is_finite());
    assert!(summary["pni"].as_f64().is_some());
    assert!(summary["timing"]["runtime_s"].as_f64().unwrap() > 0.0);

    let trace = std::fs::read_to_string(ws.path("o.trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert!(lines.next().unwrap().starts_with("# config: {"));
    assert!(lines.next().unwrap().starts_with("chain,t,iterations,sr_norm"));
    // guided steps 50..=100
    assert_eq!(lines.count(), 51);

    let png = decode_png(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(png.image.dim(), (3, 16, 16));
    let embedded: Value = serde_json::from_str(png.config.as_deref().unwrap()).unwrap();
    assert_eq!(embedded["sampler"]["lambda"], 3.0);
}

#[test]
fn extra_chains_get_numbered_outputs() {
    let ws = Workspace::new();
    let out = ws.path("c.png");
    let r = ws.translate(&out, &["--set", "sampler.chains=3"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    for name in ["c.png", "c_1.png", "c_2.png"] {
        assert!(ws.path(name).exists(), "{name}");
    }
}

#[test]
fn missing_reference_is_an_io_error_naming_the_path() {
    let ws = Workspace::new();
    let missing = ws.path("nope.png");
    let r = sddm(&["translate", "--out"], &[&ws.path("o.png")]);
    assert_eq!(code(&r), 2, "no --ref at all is a config error");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sddm"));
    let r = cmd
        .args(["translate", "--ref"])
        .arg(&missing)
        .arg("--out")
        .arg(ws.path("o.png"))
        .output()
        .unwrap();
    assert_eq!(code(&r), 3);
    assert!(stderr(&r).contains("nope.png"), "{}", stderr(&r));
}

#[test]
fn configuration_errors_exit_2() {
    let ws = Workspace::new();
    let out = ws.path("o.png");
    assert_eq!(code(&ws.translate(&out, &["--set", "sampler.no_such_key=1"])), 2);
    assert_eq!(code(&ws.translate(&out, &["--set", "sampler.blocks_N=5"])), 2);
    assert_eq!(code(&ws.translate(&out, &["--set", "sampler.T0_frac=0"])), 2);
    assert_eq!(code(&ws.translate(&out, &["--jobs", "0"])), 2);
    assert_eq!(code(&sddm(&["verify", "--suite", "bogus"], &[])), 2);
    assert_eq!(code(&sddm(&["frobnicate"], &[])), 2);

    let bad = ws.path("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&sddm(&["verify", "--suite", "decomposition", "--config"], &[&bad])), 2);
}

#[test]
fn unreachable_bridge_exits_4() {
    let ws = Workspace::new();
    let cfg = ws.path("bridge.json");
    std::fs::write(&cfg, r#"{"score": {"kind": "bridge", "endpoint": "127.0.0.1:1"}}"#).unwrap();
    let out = ws.path("o.png");
    let r = ws.translate(&out, &["--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&r), 4, "{}", stderr(&r));
}

#[test]
fn config_file_and_overrides_compose() {
    let ws = Workspace::new();
    let cfg = ws.path("c.json");
    std::fs::write(&cfg, r#"{"sampler": {"lambda": 5.0, "eps_policy": "P1"}}"#).unwrap();
    let out = ws.path("o.png");
    let r = ws.translate(&out, &["--config", cfg.to_str().unwrap(), "--set", "sampler.lambda=7"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(ws.path("o.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["sampler"]["lambda"], 7.0);
    assert_eq!(summary["config"]["sampler"]["eps_policy"], "P1");
}

#[test]
fn ilvr_writes_image_and_summary() {
    let ws = Workspace::new();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sddm"));
    let r = cmd
        .args(["ilvr", "--seed", "1", "--set", "sampler.blocks_N=4", "--ref"])
        .arg(&ws.reference)
        .arg("--out")
        .arg(ws.path("i.png"))
        .output()
        .unwrap();
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(ws.path("i.png").exists());
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(ws.path("i.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["command"], "ilvr");
}

#[test]
fn verify_decomposition_passes_and_reports() {
    let ws = Workspace::new();
    let report = ws.path("r.json");
    let r = sddm(&["verify", "--suite", "decomposition", "--seed", "4", "--report"], &[&report]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let text = String::from_utf8_lossy(&r.stdout);
    assert!(text.contains("reconstruction"), "{text}");
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(doc["suites"][0]["suite"], "decomposition");
    assert_eq!(doc["config"]["sampler"]["seed"], 4);
}

#[test]
fn all_suites_merge_in_order() {
    let schedule = Schedule::respaced(1000, 1e-4, 0.02, 100).unwrap();
    let all = run_one(Suite::All, &schedule, 9).unwrap();
    let parts: Vec<_> = [Suite::Concentration, Suite::Separability, Suite::Lowpass, Suite::Decomposition]
        .into_iter()
        .flat_map(|s| run_one(s, &schedule, 9).unwrap().suites)
        .collect();
    assert_eq!(all.suites, parts);
    assert!(all.passed());
}

#[test]
fn ablate_tabulates_each_setting() {
    let ws = Workspace::new();
    let out = ws.path("ablate.csv");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sddm"));
    let r = cmd
        .args(["ablate", "--sweep", "sampler.eps_policy=P1,P2", "--set", "sampler.blocks_N=8", "--ref"])
        .arg(&ws.reference)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# config: "));
    assert_eq!(lines[1], "setting,ssim,pni,runtime_s");
    assert!(lines[2].starts_with("sampler.eps_policy=P1,"));
    assert!(lines[3].starts_with("sampler.eps_policy=P2,"));
    assert_eq!(lines.len(), 4);
}

#[test]
fn repeated_runs_give_the_same_summary_apart_from_timing() {
    let ws = Workspace::new();
    let out = ws.path("d.png");
    let read = || {
        let r = ws.translate(&out, &["--set", "sampler.chains=2"]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        let mut v: Value = serde_json::from_str(&std::fs::read_to_string(ws.path("d.summary.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("timing");
        v
    };
    assert_eq!(read(), read());
}
