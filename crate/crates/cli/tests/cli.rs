use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mudlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mudlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mudlab(args);
    assert!(
        out.status.success(),
        "mudlab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &str = r#"
L = 16
K = 32
M_list = [0, 2]
trials = 8
master_seed = 21
algorithms = ["cmud-scaled", "cmud-d2", "lasso", "tls"]

[channel]
sigma_e = 0.05
sigma_eta = 0.05
sigma_theta = 0.05
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("cfg.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn codes_round_trip_through_the_text_format() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codes.txt");
    let p = path.to_str().unwrap();
    ok(&["codes", "-L", "8", "-K", "16", "--seed", "5", "-o", p]);
    let text = fs::read_to_string(&path).unwrap();
    let codes = mud_core::codebook::parse_code_matrix(&text).unwrap();
    assert_eq!(codes, mud_core::codebook::generate_code_matrix(8, 16, 5).unwrap());
    ok(&["codes", "-L", "8", "-K", "16", "--structured", "-o", p]);
}

#[test]
fn sweep_output_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["sweep", "-c", &cfg, "-o", a.to_str().unwrap(), "--threads", "1"]);
    ok(&["sweep", "-c", &cfg, "-o", b.to_str().unwrap(), "--threads", "3"]);
    let ra = fs::read(a.join("records.csv")).unwrap();
    assert_eq!(ra, fs::read(b.join("records.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&ra).lines().count(), 1 + 8 * 2 * 4);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "sweep");
    assert_eq!(manifest["master_seed"], 21);
    let records_hash = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .find(|o| o["name"] == "records.csv")
        .unwrap()["sha256"]
        .clone();
    use sha2::Digest;
    assert_eq!(records_hash, hex::encode(sha2::Sha256::digest(&ra)));

    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["points"].as_array().unwrap().len(), 2 * 4);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    ok(&[
        "sweep",
        "-c",
        &cfg,
        "-o",
        a.to_str().unwrap(),
        "--seed",
        "99",
        "--trials",
        "2",
    ]);
    let saved = mud_core::harness::ExperimentConfig::load(a.join("config.toml")).unwrap();
    assert_eq!((saved.master_seed, saved.trials), (99, 2));
}

#[test]
fn detect_reports_support_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = ok(&["detect", "-c", &cfg, "--algorithm", "lasso", "--simulate", "2"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["algorithm"], "lasso");
    assert_eq!(v["truth"].as_array().unwrap().len(), 2);
    assert!(v["support"].is_array());
}

#[test]
fn detect_reads_a_received_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let codes = mud_core::codebook::generate_code_matrix(16, 32, 1).unwrap();
    // y = C_4 + C_9 exactly
    let y = codes.matrix().column(4) + codes.matrix().column(9);
    let m = nalgebra::DMatrix::from_fn(16, 2, |i, j| if j == 0 { y[i] } else { 0.0 });
    let path = dir.path().join("y.txt");
    mud_core::codebook::write_real_matrix(&m, &path).unwrap();
    let out = ok(&[
        "detect",
        "-c",
        &cfg,
        "--algorithm",
        "tls",
        "--received",
        path.to_str().unwrap(),
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["support"], serde_json::json!([4, 9]));
    assert!(v["truth"].is_null());
}

#[test]
fn design_decoder_writes_a_normalized_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let path = dir.path().join("d.txt");
    let out = ok(&[
        "design-decoder",
        "-c",
        &cfg,
        "--kind",
        "d2",
        "--m0",
        "2",
        "-o",
        path.to_str().unwrap(),
    ]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["m0"], 2);
    let d = mud_core::codebook::read_real_matrix(&path).unwrap();
    let codes = mud_core::codebook::generate_code_matrix(16, 32, 1).unwrap();
    for j in 0..32 {
        assert!((d.column(j).dot(&codes.matrix().column(j)) - 1.0).abs() < 1e-8);
    }
}

#[test]
fn audit_reports_infeasible_points() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "L = 64\nK = 128\nM_list = [1, 20]\ntrials = 20\nalgorithms = [\"cmud-scaled\"]\n[codes]\nkind = \"structured\"\n",
    );
    let out_dir = dir.path().join("audit");
    ok(&["audit", "-c", &cfg, "-o", out_dir.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("audit.json")).unwrap()).unwrap();
    let entries = report["entries"].as_array().unwrap();
    assert_eq!(entries[0]["status"], "audited");
    assert_eq!(entries[1]["status"], "infeasible");
    assert_eq!(entries[1]["trials"], 0);
}

#[test]
fn figure_writes_plot_ready_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "trials = 2\n");
    let out_dir = dir.path().join("fig");
    ok(&[
        "figure",
        "-c",
        &cfg,
        "--figure",
        "3b",
        "--m-list",
        "1",
        "-o",
        out_dir.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(out_dir.join("figure_3b.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 2);
    assert!(text.lines().nth(1).unwrap().starts_with("3b,256,0.1,0.1,0.2,1,"));
}

#[test]
fn errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "trials = 0\n");
    let out = mudlab(&["sweep", "-c", &cfg, "-o", dir.path().join("x").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`trials`"));

    let out = mudlab(&["figure", "--figure", "5", "-o", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown figure"));

    let out = mudlab(&["sweep", "-c", "/definitely/missing.toml", "-o", "x"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/missing.toml"));
}
