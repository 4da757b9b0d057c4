use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn cytomix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cytomix"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), String::from_utf8_lossy(&o.stdout), stderr(o));
}

/// Small paired table: 3 donors, 2 conditions, 3 markers, counts from a
/// fixed integer recurrence.
fn write_cells(path: &Path, paired: bool) {
    let mut s = String::from("donor,condition,celltype,m1,m2,m3\n");
    let mut state: u64 = 12345;
    let mut next = |hi: u64| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) % hi
    };
    for d in 1..=3 {
        for (c, cond) in ["ctrl", "stim"].iter().enumerate() {
            if !paired && d == 3 && c == 1 {
                continue;
            }
            for _ in 0..15 {
                let base = if c == 1 { 12 } else { 6 };
                s.push_str(&format!(
                    "d{d},{cond},NK,{},{},{}\n",
                    next(base) + d,
                    next(8),
                    next(base + 4)
                ));
            }
        }
    }
    fs::write(path, s).unwrap();
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn config(&self, name: &str, body: &str) -> String {
        fs::write(self.path(name), body).unwrap();
        self.s(name)
    }
}

const SMALL_RUN: &str = r#"
input = "cells.csv"
output = "out"
seed = 5
[sampler]
chains = 2
iterations = 60
warmup = 30
[ppc]
replicates = 40
[ppc.subsets]
A = "m1:gt_median&m3:gt_median"
"#;

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn plmm_pipeline_writes_all_outputs() {
    let ws = Workspace::new();
    write_cells(&ws.path("cells.csv"), true);
    let cfg = ws.config("run.toml", SMALL_RUN);
    assert_ok(&cytomix(&["validate", "-c", &cfg]));
    assert_ok(&cytomix(&["fit-plmm", "-c", &cfg]));
    let out = ws.path("out");
    let draws = fs::read_to_string(out.join("draws.csv")).unwrap();
    assert!(draws.starts_with("chain,iteration,parameter,value\n"));
    let beta_rows = draws.lines().filter(|l| l.contains(",\"beta[1,1]\",")).count();
    assert_eq!(beta_rows, 2 * 30);
    assert!(fs::read_to_string(out.join("diagnostics.csv")).unwrap().starts_with("parameter,rhat,ess"));

    assert_ok(&cytomix(&["summarize", "-c", &cfg]));
    assert_ok(&cytomix(&["ppc", "-c", &cfg]));
    assert_ok(&cytomix(&["diagnostics", "-c", &cfg]));
    for f in [
        "summary.csv",
        "corr_increase.csv",
        "ppc.csv",
        "ppc_summary.csv",
        "plots/ppc_density.csv",
        "plots/coefficients.csv",
        "plots/correlation_heatmap.csv",
        "plots/corr_increase_hist.csv",
        "plots/corr_increase_matrix.csv",
        "plots/trace.csv",
        "manifest.json",
        "summarize-manifest.json",
        "ppc-manifest.json",
        "diagnostics-manifest.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("marker,quantity,median,q025,q975"));
    assert!(summary.contains("m1,beta_2_minus_beta_1,"));
    let density = fs::read_to_string(out.join("plots/ppc_density.csv")).unwrap();
    assert_eq!(density.lines().filter(|l| l.starts_with("A,observed,")).count(), 1);
    assert_eq!(density.lines().filter(|l| l.starts_with("A,replicated,")).count(), 40);

    let manifest: serde_json::Value = serde_json::from_slice(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "fit-plmm");
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["input_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["outputs"]["draws.csv"].is_string());
    assert_eq!(manifest["config"]["sampler"]["chains"], 2);
}

#[test]
fn identical_runs_give_identical_files() {
    let ws = Workspace::new();
    write_cells(&ws.path("cells.csv"), true);
    let cfg = ws.config("run.toml", SMALL_RUN);
    for out in ["a", "b"] {
        assert_ok(&cytomix(&["fit-plmm", "-c", &cfg, "-o", &ws.s(out)]));
        assert_ok(&cytomix(&["summarize", "-c", &cfg, "-o", &ws.s(out)]));
    }
    for f in ["draws.csv", "diagnostics.csv", "sampler_stats.json", "summary.csv", "plots/trace.csv"] {
        assert_eq!(read(&ws.path("a").join(f)), read(&ws.path("b").join(f)), "{f} differs");
    }
    let ma: serde_json::Value = serde_json::from_slice(&read(&ws.path("a/manifest.json"))).unwrap();
    let mb: serde_json::Value = serde_json::from_slice(&read(&ws.path("b/manifest.json"))).unwrap();
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert_eq!(ma["model_signature"], mb["model_signature"]);

    // A different seed changes the draws.
    assert_ok(&cytomix(&["fit-plmm", "-c", &cfg, "-o", &ws.s("c"), "--seed", "6"]));
    assert_ne!(read(&ws.path("a/draws.csv")), read(&ws.path("c/draws.csv")));
}

#[test]
fn resumed_fit_matches_uninterrupted_fit() {
    let ws = Workspace::new();
    write_cells(&ws.path("cells.csv"), true);
    let cfg = ws.config("run.toml", SMALL_RUN);
    assert_ok(&cytomix(&["fit-plmm", "-c", &cfg, "-o", &ws.s("full")]));

    let halted = cytomix(&["fit-plmm", "-c", &cfg, "-o", &ws.s("part"), "--checkpoint-every", "10", "--halt-after", "25"]);
    assert_eq!(halted.status.code(), Some(2), "{}", stderr(&halted));
    assert!(stderr(&halted).contains("resume"));
    assert!(ws.path("part/checkpoints/chain_0.json").is_file());
    assert!(!ws.path("part/draws.csv").exists());

    assert_ok(&cytomix(&["fit-plmm", "-c", &cfg, "-o", &ws.s("part"), "--checkpoint-every", "10", "--resume"]));
    assert_eq!(read(&ws.path("full/draws.csv")), read(&ws.path("part/draws.csv")));
}

#[test]
fn llmm_on_unpaired_data_is_a_pairing_error() {
    let ws = Workspace::new();
    write_cells(&ws.path("cells.csv"), false);
    let cfg = ws.config("run.toml", SMALL_RUN);
    let o = cytomix(&["fit-llmm", "-c", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("paired"), "{}", stderr(&o));
    let o = cytomix(&["validate", "-c", &cfg, "--model", "llmm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("paired"));
}

#[test]
fn single_draw_summary_has_equal_quantiles() {
    let ws = Workspace::new();
    write_cells(&ws.path("cells.csv"), true);
    let cfg = ws.config("run.toml", SMALL_RUN);
    let args = ["--chains", "1", "--iterations", "2", "--warmup", "1"];
    let mut fit = vec!["fit-plmm", "-c", &cfg];
    fit.extend(args);
    assert_ok(&cytomix(&fit));
    let mut sum = vec!["summarize", "-c", &cfg];
    sum.extend(args);
    assert_ok(&cytomix(&sum));
    let text = fs::read_to_string(ws.path("out/summary.csv")).unwrap();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[2], f[3], "{line}");
        assert_eq!(f[2], f[4], "{line}");
        rows += 1;
    }
    assert_eq!(rows, 3 * 6);
}

#[test]
fn config_errors_exit_with_validation_code() {
    let ws = Workspace::new();
    write_cells(&ws.path("cells.csv"), true);
    let cases = [
        ("input = 'cells.csv'\nchainz = 3\n", "chainz"),
        ("input = 'cells.csv'\n[sampler]\nwarmup = 500\n", "sampler"),
        ("input = 'cells.csv'\ncofactor = 0.0\n", "cofactor"),
        ("input = 'missing.csv'\n", "input"),
        ("input = 'cells.csv'\nexclude = ['m9']\n", "m9"),
        ("input = 'cells.csv'\nreference = 'nope'\n", "nope"),
        ("input = 'cells.csv'\ncelltype = 'B'\n", "B"),
        ("input = 'cells.csv'\n[schema]\ndonor = 'patient'\n", "patient"),
        ("input = 'cells.csv'\n[ppc.subsets]\nA = 'm7:gt_median'\n", "m7"),
    ];
    for (body, needle) in cases {
        let cfg = ws.config("bad.toml", body);
        let o = cytomix(&["validate", "-c", &cfg]);
        assert_eq!(o.status.code(), Some(1), "{body}: {}", stderr(&o));
        assert!(stderr(&o).contains(needle), "{body}: {}", stderr(&o));
    }
}

#[test]
fn data_errors_exit_with_validation_code() {
    let ws = Workspace::new();
    let cases = [
        ("donor,condition,celltype,m1\nd1,a,NK,3\nd1,b,NK,-1\n", "negative"),
        ("donor,condition,celltype,m1\nd1,a,NK,3\nd1,b,NK,2.5\n", "integer"),
        ("donor,condition,celltype,m1\nd1,a,NK,3\nd1,a,NK,1\n", "two levels"),
        ("donor,condition,celltype,m1\nd1,a,NK,3\nd1,b,NK,1\nd1,c,NK,1\n", "two levels"),
        ("donor,condition,m1\nd1,a,3\nd1,b,1\n", "celltype"),
    ];
    for (csv, needle) in cases {
        fs::write(ws.path("cells.csv"), csv).unwrap();
        let o = cytomix(&["validate", "--input", &ws.s("cells.csv")]);
        assert_eq!(o.status.code(), Some(1), "{csv}: {}", stderr(&o));
        assert!(stderr(&o).contains(needle), "{csv}: {}", stderr(&o));
    }
}

#[test]
fn post_processing_checks_the_fit_manifest() {
    let ws = Workspace::new();
    write_cells(&ws.path("cells.csv"), true);
    let cfg = ws.config("run.toml", SMALL_RUN);
    let o = cytomix(&["summarize", "-c", &cfg]);
    assert_eq!(o.status.code(), Some(1), "no fit yet: {}", stderr(&o));

    assert_ok(&cytomix(&["fit-plmm", "-c", &cfg]));
    // Changing the modelled markers changes the signature.
    let o = cytomix(&["summarize", "-c", &cfg, "--exclude", "m2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("signature"), "{}", stderr(&o));
    // A tampered draws file is rejected.
    let path = ws.path("out/draws.csv");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("1,60,beta[1,1],0.5\n");
    fs::write(&path, text).unwrap();
    let o = cytomix(&["ppc", "-c", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));
}

#[test]
fn collider_simulation_feeds_the_logistic_fits() {
    let ws = Workspace::new();
    let cfg = ws.config(
        "sim.toml",
        r#"
output = "sim"
seed = 3
[simulate]
kind = "dag"
[simulate.settings]
kind = "collider"
a = 1.0
b = 0.5
c = 1.0
noise_y1 = 1.0
noise_y2 = 1.0
base_y1 = 3.0
base_y2 = 3.0
donor_sd = 0.3
donors = 4
cells_per_donor = 150
cofactor = 5.0
"#,
    );
    assert_ok(&cytomix(&["simulate", "-c", &cfg]));
    for f in ["cells.csv", "truth.json", "transformed.csv", "simulate-manifest.json"] {
        assert!(ws.path("sim").join(f).is_file(), "missing {f}");
    }
    let cells = fs::read_to_string(ws.path("sim/cells.csv")).unwrap();
    assert!(cells.starts_with("donor,condition,celltype,Y1,Y2\n"));
    assert_eq!(cells.lines().count(), 1 + 4 * 150);

    let input = ws.s("sim/cells.csv");
    let mom = ws.s("mom");
    assert_ok(&cytomix(&["fit-llmm-mom", "--input", &input, "-o", &mom]));
    let text = fs::read_to_string(ws.path("mom/mom.csv")).unwrap();
    assert!(text.starts_with("marker,quantity,median,q025,q975,method,flags"));
    assert!(text.contains("Y2,beta,"));
    assert_ok(&cytomix(&["summarize", "--input", &input, "-o", &mom, "--model", "llmm-mom"]));

    let fit = ws.s("llmm");
    let common = ["--input", &input, "-o", &fit, "--chains", "2", "--iterations", "80", "--warmup", "40"];
    let mut args = vec!["fit-llmm"];
    args.extend(common);
    assert_ok(&cytomix(&args));
    let mut args = vec!["summarize", "--model", "llmm"];
    args.extend(common);
    assert_ok(&cytomix(&args));
    let summary = fs::read_to_string(ws.path("llmm/summary.csv")).unwrap();
    for t in ["intercept,beta,", "Y1,beta,", "Y2,beta,", "Y2,sigma_donor,"] {
        assert!(summary.contains(t), "{t} missing from\n{summary}");
    }

    // Same seed, same simulation.
    assert_ok(&cytomix(&["simulate", "-c", &cfg, "-o", &ws.s("sim2")]));
    assert_eq!(read(&ws.path("sim/cells.csv")), read(&ws.path("sim2/cells.csv")));
}

#[test]
fn simulate_requires_its_section() {
    let ws = Workspace::new();
    let o = cytomix(&["simulate", "-o", &ws.s("x")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("simulate"));
}
