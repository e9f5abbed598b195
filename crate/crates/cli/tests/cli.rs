use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn small_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/configs/small.toml")
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distcrb"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn with_small(cmd: &str, extra: &[&str], out: &Path) -> Output {
    let cfg = small_config();
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args, out)
}

#[test]
fn validate_passes_and_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = with_small("validate", &["--seed", "5"], d);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["validation.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_is_byte_identical_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (d, seed) in [(&a, "9"), (&b, "9"), (&c, "10")] {
        let o = with_small("sweep", &["--seed", seed, "--threads", "1"], d);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = fs::read_to_string(a.join("sweep_scnr.csv")).unwrap();
    assert!(csv.starts_with("sweep_var,component,rmse,rmse_stderr,recrbob,trials,failures\n"));
    assert_eq!(csv, fs::read_to_string(b.join("sweep_scnr.csv")).unwrap());
    assert_ne!(csv, fs::read_to_string(c.join("sweep_scnr.csv")).unwrap());
    let manifest = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 9"));
    assert!(manifest.contains("config_sha256"));
}

#[test]
fn crb_with_default_config_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["crb"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("crb.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 16);
}

#[test]
fn missing_key_names_it_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = fs::read_to_string(small_config())
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with("bt_product"))
        .map(|l| format!("{l}\n"))
        .collect();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, text).unwrap();
    let o = run(&["crb", "--config", cfg.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bt_product") && err.contains("line"), "{err}");
}

#[test]
fn invalid_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(small_config()).unwrap().replace("bt_product = 0.3", "bt_product = -1.0");
    let cfg = dir.path().join("neg.toml");
    fs::write(&cfg, text).unwrap();
    let o = run(&["crb", "--config", cfg.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unstable_noise_correlation_is_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(small_config()).unwrap().replace("decay_per_m = inf", "decay_per_m = 0.0");
    let cfg = dir.path().join("sing.toml");
    fs::write(&cfg, text).unwrap();
    let o = run(&["crb", "--config", cfg.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn mle_at_25_db_stays_in_box() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(small_config()).unwrap().replace("point_db = 10.0", "point_db = 25.0");
    let cfg = dir.path().join("mle.toml");
    fs::write(&cfg, text).unwrap();
    let o = run(&["mle", "--config", cfg.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("o/mle.csv")).unwrap();
    let est: Vec<f64> = csv.lines().nth(2).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!((14_500.0..=15_500.0).contains(&est[0]) && (9_500.0..=10_500.0).contains(&est[1]));
    assert!((-20.0..=80.0).contains(&est[2]) && (-20.0..=80.0).contains(&est[3]));
}

#[test]
fn offset_sweep_writes_one_file_per_offset() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(small_config())
        .unwrap()
        .replace("sweep = \"scnr\"", "sweep = \"freq_offset\"")
        .replace("trials = 4", "trials = 0");
    let cfg = dir.path().join("fo.toml");
    fs::write(&cfg, text).unwrap();
    let o = run(&["sweep", "--config", cfg.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("o/sweep_freq_offset_hz=300.csv").exists());
    assert!(dir.path().join("o/sweep_freq_offset_hz=3000.csv").exists());
}
