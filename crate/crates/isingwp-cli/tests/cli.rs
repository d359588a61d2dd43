use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn isingwp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isingwp")).args(args).env("RUST_BACKTRACE", "0").output().expect("binary runs")
}

fn run_ok(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = isingwp(&args);
    assert!(o.status.success(), "{sub} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn spectra_emits_dispersion_with_mass_row_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    run_ok("spectra", &configs().join("spectra.toml"), dir.path(), &[]);
    let spectrum = json(&dir.path().join("spectrum.json"));
    let m1 = spectrum["m1"].as_f64().unwrap();
    let csv = std::fs::read_to_string(dir.path().join("dispersion.csv")).unwrap();
    let k0_row: Vec<&str> = csv.lines().find(|l| l.split(',').nth(1) == Some("0")).unwrap().split(',').collect();
    assert_eq!(k0_row[2].parse::<f64>().unwrap(), m1);
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["subcommand"], "spectra");
    // Defaults the config left out are echoed.
    assert_eq!(manifest["config"]["model"]["boundary"], "pbc");
    assert_eq!(manifest["config"]["wavepacket"]["construction"], "linear");
    assert_eq!(manifest["config"]["wavepacket"]["delta"], 0.2);
    assert!(manifest["artifacts"].as_array().unwrap().iter().any(|a| a == "dispersion.csv"));
}

#[test]
fn prepare_reports_predicted_and_simulated_success() {
    let dir = tempfile::tempdir().unwrap();
    run_ok("prepare", &configs().join("prepare.toml"), dir.path(), &[]);
    let r = json(&dir.path().join("prepare.json"));
    let (pred, sim) = (r["p_success"]["predicted"].as_f64().unwrap(), r["p_success"]["simulated"].as_f64().unwrap());
    assert!((pred - sim).abs() < 1e-12);
    let closed = r["infidelity"]["closed_form"].as_f64().unwrap();
    assert!((closed - r["infidelity"]["simulated"].as_f64().unwrap()).abs() < 1e-12);
    let circuit = json(&dir.path().join("circuit.json"));
    assert_eq!(circuit["n_qubits"], 8);
}

#[test]
fn manifest_rerun_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok("noise-lab", &configs().join("noise.toml"), &a, &["--seed", "11"]);
    run_ok("noise-lab", &a.join("manifest.json"), &b, &[]);
    assert_eq!(std::fs::read(a.join("results.csv")).unwrap(), std::fs::read(b.join("results.csv")).unwrap());
    assert_eq!(json(&b.join("manifest.json"))["seeds"]["noise"], 11);
    let threads = dir.path().join("c");
    run_ok("noise-lab", &a.join("manifest.json"), &threads, &["--threads", "1"]);
    assert_eq!(std::fs::read(a.join("results.csv")).unwrap(), std::fs::read(threads.join("results.csv")).unwrap());
}

#[test]
fn scatter_compare_and_skewness_chain() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("scatter");
    run_ok("scatter", &configs().join("scatter.toml"), &sc, &[]);
    let summary = json(&sc.join("scatter.json"));
    assert!(summary["reflection_asymmetry"].as_f64().unwrap() < 1e-10);
    let cfg = dir.path().join("compare.toml");
    std::fs::write(&cfg, format!("[compare]\nreference = {:?}\ncomputed = {:?}\n", sc.join("results.csv"), sc.join("results.csv"))).unwrap();
    let stdout = run_ok("compare", &cfg, &dir.path().join("cmp"), &[]);
    assert!(stdout.contains("max |diff| = 0.000e0"), "{stdout}");
    let cfg = dir.path().join("skew.toml");
    std::fs::write(&cfg, format!("[analysis]\ninput = {:?}\ntime = 0.0\n", sc.join("results.csv"))).unwrap();
    run_ok("skewness", &cfg, &dir.path().join("skew"), &[]);
    let skew = json(&dir.path().join("skew").join("skewness.json"));
    assert_eq!(skew["t"], 0.0);
    assert!(skew["report"]["gamma"].as_f64().unwrap().is_finite());
}

#[test]
fn oversized_lattice_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("big.toml");
    std::fs::write(&cfg, "[model]\nL = 30\n").unwrap();
    let o = isingwp(&["spectra", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("refusing exact diagonalization on 30 qubits"));
}

#[test]
fn unknown_keys_fail_with_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nL = 12\n\n[scatter]\ndt = 0.1\nn_T = 2\nsteps = 3\n").unwrap();
    let o = isingwp(&["scatter", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 7") && err.contains("unknown field `steps`"), "{err}");
}
