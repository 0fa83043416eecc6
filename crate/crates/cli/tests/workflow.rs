use qcomp::compensator::{spectrum_from_sigma, DEFAULT_TAU};
use qcomp::pipeline::ProfileTable;
use qcomp::{MatrixId, Slot};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, toml: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, toml).unwrap();
        p
    }

    fn qcomp(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_qcomp"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.qcomp(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.path(name)).unwrap()
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&self.read(name)).unwrap()
    }
}

fn sha(p: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(p).unwrap()))
}

/// Small model with light probing so a full workflow stays fast.
const SMALL: &str = r#"
[model]
hidden = 32
ffn_hidden = 48
vocab = 64
layers = ["dense", "moe"]

[calibration]
samples = 2
tokens = 8

[probe]
ranks = [8, 16, 32]
warmup = 1
reps = 3
tokens = 16
"#;

#[test]
fn fixture_is_deterministic_per_seed() {
    let w = Work::new();
    w.ok(&["fixture", "--out", "a.qcfx"]);
    w.ok(&["fixture", "--out", "b.qcfx"]);
    w.ok(&["--seed", "8", "fixture", "--out", "c.qcfx"]);
    assert_eq!(sha(&w.path("a.qcfx")), sha(&w.path("b.qcfx")));
    assert_ne!(sha(&w.path("a.qcfx")), sha(&w.path("c.qcfx")));
}

#[test]
fn invalid_config_exits_2_with_field_name() {
    let w = Work::new();
    let cfg = w.config("bad.toml", "[model]\nhidden = 0\n");
    let out = w.qcomp(&["--config", cfg.to_str().unwrap(), "fixture"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hidden"));
    let unknown = w.config("unknown.toml", "[model]\ndepth = 3\n");
    let out = w.qcomp(&["--config", unknown.to_str().unwrap(), "fixture"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_workflow() {
    let w = Work::new();
    let cfg = w.config("small.toml", SMALL);
    let c = cfg.to_str().unwrap();
    w.ok(&["--config", c, "fixture", "--out", "f.qcfx"]);
    w.ok(&["--config", c, "calibrate", "--fixture", "f.qcfx", "--out", "cal.json"]);
    w.ok(&["--config", c, "calibrate", "--fixture", "f.qcfx", "--out", "cal2.json"]);
    let (a, b) = (w.json("cal.json"), w.json("cal2.json"));
    for field in ["spectra", "sensitivity", "expert_scores", "fixture_sha256", "config_sha256"] {
        assert_eq!(a[field], b[field], "{field} differs between calibrations");
    }
    assert_eq!(a["fixture_sha256"], Value::String(sha(&w.path("f.qcfx"))));
    assert_eq!(a["nondeterministic"], json!(["timing", "r_std"]));

    w.ok(&["--config", c, "allocate", "--artifact", "cal.json", "--out", "plan.json"]);
    w.ok(&["--config", c, "allocate", "--artifact", "cal.json", "--out", "plan2.json"]);
    assert_eq!(w.read("plan.json"), w.read("plan2.json"));
    let plan = w.json("plan.json");
    assert_eq!(plan["provenance"]["artifact_sha256"], Value::String(sha(&w.path("cal.json"))));

    w.ok(&["--config", c, "run", "--fixture", "f.qcfx", "--plan", "plan.json", "--steps", "6", "--out", "prof.csv"]);
    let summary = w.json("prof.json");
    assert!(summary["oracle_max_abs_diff"].as_f64().unwrap() <= 1e-5);
    assert_eq!(summary["tokens"].as_array().unwrap().len(), 6);
    let table = ProfileTable::parse(&w.read("prof.csv")).unwrap();
    table.check().unwrap();
    assert!(table.iteration().is_some());

    let seq = w.ok(&[
        "--config", c, "run", "--fixture", "f.qcfx", "--plan", "plan.json", "--steps", "6", "--mode", "sequential",
        "--out", "seq.csv",
    ]);
    assert!(seq.contains("checksum"));
    assert_eq!(w.json("seq.json")["tokens"], summary["tokens"]);

    let args = [
        "--config", c, "report", "--artifact", "cal.json", "--plan", "plan.json", "--profile", "prof.csv",
    ];
    let r1 = w.ok(&args);
    assert_eq!(r1, w.ok(&args));
    assert!(r1.contains("128.33"));
    assert!(r1.contains("# latency breakdown"));
    assert!(!r1.contains("no runs recorded"));
}

#[test]
fn zero_budget_plan_runs_like_the_quantized_model() {
    let w = Work::new();
    let toml = format!(
        "{SMALL}\n[allocation]\nr_std = {{ ATT_QKV = 0, ATT_O = 0, FFN_UPGATE = 0, FFN_DOWN = 0 }}\n"
    );
    let cfg = w.config("zero.toml", &toml);
    let c = cfg.to_str().unwrap();
    w.ok(&["--config", c, "fixture", "--out", "f.qcfx"]);
    w.ok(&["--config", c, "calibrate", "--fixture", "f.qcfx", "--out", "cal.json"]);
    w.ok(&["--config", c, "allocate", "--artifact", "cal.json", "--out", "plan.json"]);
    let plan = w.json("plan.json");
    assert!(plan["entries"].as_array().unwrap().iter().all(|e| e["rank"] == 0));
    w.ok(&["--config", c, "run", "--fixture", "f.qcfx", "--plan", "plan.json", "--steps", "5", "--out", "p.csv"]);
    w.ok(&[
        "--config", c, "run", "--fixture", "f.qcfx", "--plan", "plan.json", "--steps", "5", "--mode", "quantized",
        "--out", "q.csv",
    ]);
    assert_eq!(w.json("p.json")["checksum"], w.json("q.json")["checksum"]);
}

#[test]
fn provenance_mismatches_exit_3() {
    let w = Work::new();
    let cfg = w.config("small.toml", SMALL);
    let c = cfg.to_str().unwrap();
    w.ok(&["--config", c, "fixture", "--out", "f.qcfx"]);
    w.ok(&["--config", c, "calibrate", "--fixture", "f.qcfx", "--out", "cal.json"]);
    w.ok(&["--config", c, "allocate", "--artifact", "cal.json", "--out", "plan.json"]);

    // fixture built from another seed
    let out = w.qcomp(&["--config", c, "--seed", "99", "calibrate", "--fixture", "f.qcfx"]);
    assert_eq!(out.status.code(), Some(3));
    // artifact from another config
    let other = w.config("other.toml", &format!("{SMALL}\n[allocation]\ntau = 0.02\n"));
    let out = w.qcomp(&["--config", other.to_str().unwrap(), "allocate", "--artifact", "cal.json"]);
    assert_eq!(out.status.code(), Some(3));
    // plan pointing at a different fixture
    let mut plan = w.json("plan.json");
    plan["provenance"]["fixture_sha256"] = json!("00");
    std::fs::write(w.path("tampered.json"), plan.to_string()).unwrap();
    let out = w.qcomp(&["--config", c, "run", "--fixture", "f.qcfx", "--plan", "tampered.json"]);
    assert_eq!(out.status.code(), Some(3));
    // plan for a different artifact
    let mut plan = w.json("plan.json");
    plan["provenance"]["artifact_sha256"] = json!("00");
    std::fs::write(w.path("foreign.json"), plan.to_string()).unwrap();
    let out = w.qcomp(&["--config", c, "report", "--artifact", "cal.json", "--plan", "foreign.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn perturbation_tables() {
    let w = Work::new();
    let cfg = w.config("small.toml", SMALL);
    let c = cfg.to_str().unwrap();
    w.ok(&["--config", c, "fixture", "--out", "f.qcfx"]);
    w.ok(&["--config", c, "calibrate", "--fixture", "f.qcfx", "--out", "cal.json"]);
    w.ok(&["--config", c, "allocate", "--artifact", "cal.json", "--out", "plan.json"]);
    w.ok(&["--config", c, "perturb", "--fixture", "f.qcfx", "--plan", "plan.json", "--trials", "0", "--out", "p0.csv"]);
    let header = "trial,moved_from,moved_to,delta_rank,proxy_kl,d_proxy,tokens_per_s,d_throughput\n";
    assert_eq!(w.read("p0.csv"), header);

    w.ok(&["--config", c, "perturb", "--fixture", "f.qcfx", "--plan", "plan.json", "--trials", "3", "--out", "p.csv"]);
    let text = w.read("p.csv");
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0][0], "0");
    assert_eq!((rows[0][3], rows[0][5], rows[0][7]), ("0", "0", "0"));
    for r in &rows[1..] {
        assert_ne!(r[1], r[2]);
        assert!(r[3].parse::<usize>().unwrap() >= 8);
    }
}

#[test]
fn report_without_runs() {
    let w = Work::new();
    let cfg = w.config("small.toml", SMALL);
    let c = cfg.to_str().unwrap();
    w.ok(&["--config", c, "fixture", "--out", "f.qcfx"]);
    w.ok(&["--config", c, "calibrate", "--fixture", "f.qcfx", "--out", "cal.json"]);
    std::fs::write(w.path("empty.csv"), "scope,window,total_ms,cpu_ms,gpu_ms,comm_ms,overlap_ms\n").unwrap();
    let r = w.ok(&["--config", c, "report", "--artifact", "cal.json", "--profile", "empty.csv"]);
    assert!(r.contains("no runs recorded"));
    assert!(r.contains("57.54"));
}

#[test]
fn hand_built_artifact_reproduces_the_worked_chain() {
    let w = Work::new();
    let small = SMALL.replace("hidden = 32", "hidden = 64");
    let toml = format!("{small}\n[allocation]\nr_std = {{ ATT_QKV = 64, ATT_O = 32, FFN_UPGATE = 64, FFN_DOWN = 32 }}\n");
    let cfg = w.config("worked.toml", &toml);
    let c = cfg.to_str().unwrap();
    w.ok(&["--config", c, "fixture", "--out", "f.qcfx"]);
    w.ok(&["--config", c, "calibrate", "--fixture", "f.qcfx", "--out", "cal.json"]);

    let (q, k, v) = (MatrixId::dense(0, Slot::Q), MatrixId::dense(0, Slot::K), MatrixId::dense(0, Slot::V));
    let mut sq = vec![1.0, 0.9, 0.1];
    sq.resize(64, 0.045);
    let spectra = [
        spectrum_from_sigma(q, &sq, DEFAULT_TAU).unwrap(),
        spectrum_from_sigma(k, &[1.0; 64], DEFAULT_TAU).unwrap(),
        spectrum_from_sigma(v, &[1.0; 64], DEFAULT_TAU).unwrap(),
    ];
    let mut art = w.json("cal.json");
    for s in art["spectra"].as_array_mut().unwrap() {
        let id: MatrixId = serde_json::from_value(s["matrix_id"].clone()).unwrap();
        if let Some(planted) = spectra.iter().find(|p| p.matrix_id == id) {
            *s = serde_json::to_value(planted).unwrap();
        }
    }
    for pair in art["sensitivity"]["s_matrix"].as_array_mut().unwrap() {
        let id: MatrixId = serde_json::from_value(pair[0].clone()).unwrap();
        let score = [(q, 0.75), (k, 0.15), (v, 0.10)].iter().find(|(m, _)| *m == id).map(|p| p.1);
        if let Some(score) = score {
            pair[1] = json!(score);
        }
    }
    for pair in art["sensitivity"]["s_layer"].as_array_mut().unwrap() {
        pair[1] = json!(1.0);
    }
    let mut text = serde_json::to_string_pretty(&art).unwrap();
    text.push('\n');
    std::fs::write(w.path("hand.json"), text).unwrap();

    w.ok(&["--config", c, "allocate", "--artifact", "hand.json", "--out", "plan.json"]);
    w.ok(&["--config", c, "allocate", "--artifact", "hand.json", "--out", "plan2.json"]);
    assert_eq!(w.read("plan.json"), w.read("plan2.json"));
    let plan = w.json("plan.json");
    let rank_of = |slot: &str| {
        plan["entries"]
            .as_array()
            .unwrap()
            .iter()
            .find(|e| e["layer"] == 0 && e["slot"] == slot)
            .map(|e| (e["rank"].as_u64().unwrap(), e["priority"].as_f64().unwrap()))
            .unwrap()
    };
    let (rq, pq) = rank_of("q");
    let (rk, pk) = rank_of("k");
    let (rv, pv) = rank_of("v");
    assert_eq!((rq, rk, rv), (64, 0, 0));
    assert!((pq - 0.9780).abs() < 5e-4 && (pk - 0.01321).abs() < 5e-5 && (pv - 0.008806).abs() < 5e-6);
}
