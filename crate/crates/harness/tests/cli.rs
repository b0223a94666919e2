use std::path::Path;
use std::process::{Command, Output};

use fisar_harness::{ExperimentConfig, MetricTable, OUTPUT_ROOT_ENV};

fn fisar(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fisar")).args(args).env(OUTPUT_ROOT_ENV, root).output().unwrap()
}

const TINY_NAV: &str = r#"
experiment = "nav-train"
seeds = [3, 4]
output_dir = "nav"

[cell]
hidden = 4

[unroll]
span = 4
batch = 1
truncation = 2

[meta]
outer_steps = 1

[policy]
hidden = 4
trajectories = 2

[nav]
horizon = 8

[nav_train]
iterations = 3
"#;

#[test]
fn invalid_config_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[unroll]\nbeta = -0.5\n").unwrap();
    let out = fisar(&["qcqp", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("`unroll.beta`"), "{err}");

    std::fs::write(&path, "[unroll]\nbta = 0.1\n").unwrap();
    let out = fisar(&["qcqp", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("bta"));
}

#[test]
fn relative_output_lands_under_the_root_with_a_manifest() {
    let root = tempfile::tempdir().unwrap();
    let cfg_path = root.path().join("tiny.toml");
    std::fs::write(&cfg_path, TINY_NAV).unwrap();
    let out = fisar(&["nav-train", "--config", cfg_path.to_str().unwrap()], root.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let dir = root.path().join("nav");
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let cfg = ExperimentConfig::from_toml(TINY_NAV).unwrap();
    assert_eq!(manifest["experiment"], "nav-train");
    assert_eq!(manifest["config_sha256"], cfg.hash());
    assert_eq!(manifest["seeds"], serde_json::json!([3, 4]));
    assert_eq!(ExperimentConfig::from_toml(manifest["config"].as_str().unwrap()).unwrap(), cfg);
    let files = manifest["files"].as_array().unwrap();
    let names: Vec<&str> = files.iter().map(|f| f["name"].as_str().unwrap()).collect();
    for expected in ["aggregate_fisar.csv", "aggregate_projected-pg.csv", "seed_3_fisar.csv", "seed_4_projected-pg.csv"] {
        assert!(names.contains(&expected), "{names:?}");
    }
    for f in files {
        let bytes = std::fs::read(dir.join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"], fisar_harness::config::hex_digest(&bytes));
    }
    assert!(dir.join("timing.json").exists());

    let per_seed = MetricTable::load(&dir.join("seed_3_fisar.csv")).unwrap();
    assert_eq!(per_seed.rows.len(), 4);
    assert_eq!(per_seed.columns[0], "return");
}

#[test]
fn five_seed_aggregate_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let mut inputs = Vec::new();
    for offset in 0..5 {
        let mut t = MetricTable::new(vec!["return".into(), "violation_0".into()]);
        for k in 0..3 {
            t.push(k, vec![k as f64 + offset as f64, 7.0]);
        }
        let path = dir.path().join(format!("seed_{offset}.csv"));
        t.save(&path).unwrap();
        inputs.push(path.to_str().unwrap().to_owned());
    }
    let out_path = dir.path().join("agg.csv");
    let mut args = vec!["aggregate", "--out", out_path.to_str().unwrap()];
    args.extend(inputs.iter().map(String::as_str));
    let out = fisar(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut reader = csv::Reader::from_path(&out_path).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(str::to_owned).collect();
    assert_eq!(
        header,
        [
            "iteration",
            "seeds",
            "degenerate",
            "return_mean",
            "return_ci_low",
            "return_ci_high",
            "violation_0_mean",
            "violation_0_ci_low",
            "violation_0_ci_high"
        ]
    );
    // Offsets 0..4: mean k + 2, sample variance 5/2, so 1.96·√(5/2 / 5) = 1.96·√0.5.
    let half = 1.96 * 0.5f64.sqrt();
    for (k, rec) in reader.records().enumerate() {
        let v: Vec<f64> = rec.unwrap().iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(&v[..3], &[k as f64, 5.0, 0.0]);
        let mean = k as f64 + 2.0;
        assert!((v[3] - mean).abs() <= 1e-12);
        assert!((v[4] - (mean - half)).abs() <= 1e-12 && (v[5] - (mean + half)).abs() <= 1e-12);
        assert_eq!(&v[6..], &[7.0, 7.0, 7.0]);
    }
}

#[test]
fn single_input_aggregate_warns_and_marks_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = MetricTable::new(vec!["return".into()]);
    t.push(0, vec![1.5]);
    let input = dir.path().join("only.csv");
    t.save(&input).unwrap();
    let out_path = dir.path().join("agg.csv");
    let out = fisar(&["aggregate", "--out", out_path.to_str().unwrap(), input.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("degenerate"));
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("0,1,1,"), "{text}");
}
