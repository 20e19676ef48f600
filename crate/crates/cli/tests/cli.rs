use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hierdp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierdp"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn small_synth(dir: &Path) {
    fs::write(
        dir.join("gen.toml"),
        r#"
seed = 5
groups = 3
impressions_per_group = 2000
conversion_rate = 0.1
days = 20
mean_delay_days = 2.0
attribution_window_days = 8
delay_bucket_days = 4
attributes = [{ name = "device", cardinality = 2 }]
"#,
    )
    .unwrap();
    let out = hierdp(dir, &["synth", "--config", "gen.toml", "--out", "data.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_from_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_synth(d);
    assert!(d.join("data.dataset.json").exists());

    let out = hierdp(d, &["build-tree", "--dataset", "data.dataset.json", "--side", "prior", "--out", "prior.txt"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(d.join("prior.txt")).unwrap().starts_with("0,-1,0,,"));

    let out = hierdp(d, &["budget", "--tree", "prior.txt", "--epsilon", "2", "--out", "split.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let split: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("split.json")).unwrap()).unwrap();
    let levels = split["split"]["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 4);
    let total: f64 = levels.iter().map(|l| l.as_f64().unwrap()).sum();
    assert!((total - 2.0).abs() < 1e-12);

    let out = hierdp(d, &["budget", "--tree", "prior.txt", "--epsilon", "2", "--per-group"]);
    assert!(out.status.success());
    let groups: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(groups["groups"].as_array().unwrap().len(), 3);

    let out = hierdp(d, &["postprocess", "--tree", "prior.txt", "--split", "split.json", "--seed", "3", "--out", "est.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let est = fs::read_to_string(d.join("est.csv")).unwrap();
    assert!(est.starts_with("node,parent,level,path,count,noisy"));
    assert_eq!(est.lines().count(), fs::read_to_string(d.join("prior.txt")).unwrap().lines().count() + 1);
}

#[test]
fn experiment_writes_results_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("exp.toml"),
        r#"
epsilons = [1.0, 4.0]
taus = [10.0]
methods = ["equal_no_pp", "equal_pp", "greedy_pp"]
trials = 10
seed = 3

[data]
kind = "synthetic"
seed = 1
groups = 2
impressions_per_group = 1500
conversion_rate = 0.1
days = 20
mean_delay_days = 2.0
attribution_window_days = 8
delay_bucket_days = 4
attributes = [{ name = "device", cardinality = 2 }]
"#,
    )
    .unwrap();
    let run = |out: &str| {
        let o = hierdp(d, &["experiment", "--config", "exp.toml", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(d.join(out)).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 3);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("a.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 3);
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);

    let o = hierdp(d, &["experiment", "--config", "exp.toml", "--seed", "4", "--trials", "2", "--methods", "equal_pp"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    assert_eq!(hierdp(d, &["experiment", "--config", "missing.toml"]).status.code(), Some(2));
    fs::write(d.join("bad.toml"), "epsilons = [1.0]\n").unwrap();
    assert_eq!(hierdp(d, &["experiment", "--config", "bad.toml"]).status.code(), Some(2));
    assert_eq!(hierdp(d, &["budget", "--tree", "t.txt"]).status.code(), Some(2));

    small_synth(d);
    let mut spec: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("data.dataset.json")).unwrap()).unwrap();
    spec["timestamp_column"] = "nope".into();
    fs::write(d.join("bad_column.json"), spec.to_string()).unwrap();
    assert_eq!(hierdp(d, &["build-tree", "--dataset", "bad_column.json", "--out", "t.txt"]).status.code(), Some(2));

    let mut csv = fs::read_to_string(d.join("data.csv")).unwrap();
    csv.push_str("12,p00,device_0,1,5\n");
    fs::write(d.join("data.csv"), csv).unwrap();
    let out = hierdp(d, &["build-tree", "--dataset", "data.dataset.json", "--out", "t.txt"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    fs::write(d.join("bad_tree.txt"), "0,-1,0,,5\n1,0,1,a,-2\n").unwrap();
    assert_eq!(
        hierdp(d, &["postprocess", "--tree", "bad_tree.txt", "--epsilon", "1", "--out", "e.csv"]).status.code(),
        Some(3)
    );
}

#[test]
fn shipped_configs_parse() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    let bench = configs.join("benchmark.toml");
    let out = hierdp(
        dir.path(),
        &["experiment", "--config", bench.to_str().unwrap(), "--trials", "2", "--epsilons", "4", "--methods", "equal_pp"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["csscl.toml", "camb.toml"] {
        // Parses, then fails on the absent dataset.
        let path = configs.join(name);
        let out = hierdp(dir.path(), &["experiment", "--config", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
