use std::path::Path;
use std::process::{Command, Output};

fn fedpull(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedpull"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("FEDPULL_THREADS", t),
        None => cmd.env_remove("FEDPULL_THREADS"),
    };
    cmd.output().unwrap()
}

fn write_config(dir: &Path, body: serde_json::Value) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn tiny(out: &Path) -> serde_json::Value {
    serde_json::json!({
        "experiment": "fl",
        "domains": [
            {"kind": "copy", "size": 60, "seed": 1},
            {"kind": "swap_pairs", "size": 40, "seed": 2}
        ],
        "model": {"d_model": 8, "n_heads": 2, "enc_layers": 1, "dec_layers": 1, "d_ffn": 16},
        "pretrain_steps": 10,
        "steps_per_round": 3,
        "rounds": 2,
        "batch_size": 4,
        "test_size": 5,
        "dev_size": 2,
        "policy": {"mode": "dp_greater"},
        "seeds": [4],
        "output_dir": out
    })
}

#[test]
fn unknown_experiment_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({"experiment": "foo"}));
    let out = fedpull(&["run", &cfg], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("foo"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(fedpull(&["run", missing.to_str().unwrap()], None).status.code(), Some(2));
    let cfg = write_config(dir.path(), serde_json::json!({"experiment": "fl", "rounds": 0}));
    assert_eq!(fedpull(&["run", &cfg, "--validate"], None).status.code(), Some(2));
    let cfg = write_config(dir.path(), tiny(dir.path()));
    assert_eq!(fedpull(&["run", &cfg, "--validate"], Some("zero")).status.code(), Some(2));
}

#[test]
fn validate_never_trains() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = write_config(dir.path(), tiny(&out_dir));
    let out = fedpull(&["run", &cfg, "--validate"], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("config ok"));
    assert!(!out_dir.exists());
}

#[test]
fn runs_write_identical_reports_for_any_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), tiny(&dir.path().join("ignored")));
    let mut reports = Vec::new();
    for (threads, sub) in [("1", "a"), ("4", "b")] {
        let out_dir = dir.path().join(sub);
        let out = fedpull(&["run", &cfg, "--out", out_dir.to_str().unwrap()], Some(threads));
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let seed_dir = out_dir.join("fl").join("4");
        for f in ["report.json", "metrics.csv", "histograms.csv"] {
            assert!(seed_dir.join(f).is_file(), "{f}");
        }
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(seed_dir.join("report.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("timestamp");
        v["config"].as_object_mut().unwrap().remove("output_dir");
        reports.push(v);
    }
    assert_eq!(reports[0], reports[1]);
    assert!(!dir.path().join("ignored").exists());
}
