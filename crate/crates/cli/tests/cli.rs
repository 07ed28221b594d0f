use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ossfield")).args(args).output().unwrap()
}

fn cfg(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn simulate_writes_sample_manifest_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ma");
    let o = run(&["simulate", "--config", &cfg("moving_average.toml"), "--seed", "3", "-o", "run.replicates=50", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&read(&out, "manifest.json")).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["command"], "simulate");
    let files = manifest["files"].as_array().unwrap();
    let sample = std::fs::read(out.join("sample.bin")).unwrap();
    let entry = files.iter().find(|f| f["path"] == "sample.bin").unwrap();
    assert_eq!(entry["bytes"], sample.len());
    assert_eq!(entry["sha256"], ossfield_cli::persist::sha256_hex(&sample));
    let cfg_back = ossfield_cli::config::RunConfig::parse(&read(&out, "config.toml"), &[]).unwrap();
    assert_eq!(cfg_back.digest(), manifest["config_digest"].as_str().unwrap());
    let text = read(&out, "sample.txt");
    assert_eq!(text.lines().count(), 51);
    assert_eq!(text.lines().next().unwrap().split_whitespace().count(), 1 + 2 * 2);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let proper = run(&["verify", "proper", "--config", &cfg("degenerate.toml"), "-o", "run.replicates=1000", "--out", &dir("p")]);
    assert_eq!(proper.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&proper.stdout).contains("FAIL: fullness"));
    let hyp = run(&["simulate", "--config", &cfg("moving_average.toml"), "-o", "field.D=[[1.5, 0.0], [0.0, 0.6]]", "--out", &dir("h")]);
    assert_eq!(hyp.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&hyp.stderr).starts_with("error:"));
    assert_eq!(run(&["plotdata", "bogus", "x"]).status.code(), Some(2));
    assert_eq!(run(&["verify", "oss", "--config", "/nonexistent.toml"]).status.code(), Some(4));
    let no_h = run(&["verify", "increments", "--config", &cfg("moving_average.toml"), "--out", &dir("i")]);
    assert_eq!(no_h.status.code(), Some(2));
}

#[test]
fn plotdata_field_slice_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let o = run(&[
        "simulate",
        "--config",
        &cfg("field_slice.toml"),
        "-o",
        "run.grid={ lo = [-1.0, -1.0], hi = [1.0, 1.0], n = [5, 4] }",
        "-o",
        "quadrature.cells_per_axis=48",
        "--out",
        sim.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let plot = tmp.path().join("plot");
    let p = run(&["plotdata", "field_slice", sim.join("sample.bin").to_str().unwrap(), "--out", plot.to_str().unwrap()]);
    assert_eq!(p.status.code(), Some(0), "{}", String::from_utf8_lossy(&p.stderr));
    let tsv = read(&plot, "field_slice.tsv");
    let mut lines = tsv.lines();
    assert_eq!(lines.next().unwrap().split('\t').collect::<Vec<_>>(), ["x0", "x1", "value"]);
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split('\t').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r.len() == 3 && r[2].is_finite()));
}

#[test]
fn plotdata_slope_fit_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let v = tmp.path().join("nb");
    let o = run(&["verify", "normbound", "--config", &cfg("jordan.toml"), "--out", v.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let plot = tmp.path().join("plot");
    let p = run(&["plotdata", "slope_fit", v.join("normbound_report.json").to_str().unwrap(), "--out", plot.to_str().unwrap()]);
    assert_eq!(p.status.code(), Some(0), "{}", String::from_utf8_lossy(&p.stderr));
    let tsv = read(&plot, "slope_fit.tsv");
    let header: Vec<&str> = tsv.lines().next().unwrap().split('\t').collect();
    assert_eq!(header, ["r_lo", "r_hi", "slope", "corrected", "target_lo", "target_hi"]);
    assert_eq!(tsv.lines().count(), 3);
}

#[test]
fn plotdata_ecf_panel_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let v = tmp.path().join("icf");
    let o = run(&["verify", "integral_cf", "--config", &cfg("harmonizable.toml"), "-o", "run.replicates=400", "--out", v.to_str().unwrap()]);
    assert!(matches!(o.status.code(), Some(0) | Some(1)), "{}", String::from_utf8_lossy(&o.stderr));
    let plot = tmp.path().join("plot");
    let p = run(&["plotdata", "ecf_panel", v.join("integral_cf_report.json").to_str().unwrap(), "--out", plot.to_str().unwrap()]);
    assert_eq!(p.status.code(), Some(0), "{}", String::from_utf8_lossy(&p.stderr));
    let tsv = read(&plot, "ecf_panel.tsv");
    let header: Vec<&str> = tsv.lines().next().unwrap().split('\t').collect();
    assert_eq!(header, ["theta_index", "re_emp", "im_emp", "se", "theo", "z"]);
    assert!(tsv.lines().count() > 1);
}
