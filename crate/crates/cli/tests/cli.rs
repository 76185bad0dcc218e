use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"))
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sphereflow"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn moments_succeeds_and_reports_hash_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("reports");
    let res = run(&["moments"], &scenario("s3_moments"), &out);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let doc = read_json(&out.join("moments.json"));
    assert_eq!(doc["command"], "moments");
    assert_eq!(doc["pass"], true);
    assert_eq!(doc["library_version"], env!("CARGO_PKG_VERSION"));
    let hash = doc["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    let summary = std::fs::read_to_string(out.join("moments.csv")).unwrap();
    assert!(summary.contains("config_hash") && summary.contains(hash));
    assert!(out.join("moments_rows.csv").exists());
}

#[test]
fn overrides_change_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["moments"], &scenario("euclidean"), &a).status.code(), Some(0));
    assert_eq!(run(&["moments", "--order", "1"], &scenario("euclidean"), &b).status.code(), Some(0));
    let (ha, hb) = (read_json(&a.join("moments.json")), read_json(&b.join("moments.json")));
    assert_ne!(ha["config_hash"], hb["config_hash"]);
}

#[test]
fn unsupported_dimension_is_a_config_error_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("euclidean")).unwrap().replacen("m = 2", "m = 5", 1);
    assert!(text.contains("m = 5"));
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, text).unwrap();
    let out = dir.path().join("reports");
    let res = run(&["moments"], &config, &out);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn malformed_inputs_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("reports");
    let config = dir.path().join("broken.toml");
    std::fs::write(&config, "m = [").unwrap();
    assert_eq!(run(&["moments"], &config, &out).status.code(), Some(2));
    assert_eq!(run(&["moments"], &dir.path().join("missing.toml"), &out).status.code(), Some(2));
    let short = run(&["expand", "--ladder", "0.3,0.2"], &scenario("euclidean"), &out);
    assert_eq!(short.status.code(), Some(2));
    let rising = run(&["expand", "--ladder", "0.1,0.2,0.3,0.4"], &scenario("euclidean"), &out);
    assert_eq!(rising.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn flowline_on_flat_space_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("reports");
    let res = run(&["flowline", "--threads", "1"], &scenario("euclidean"), &out);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("flowline_samples.csv").exists());
}
