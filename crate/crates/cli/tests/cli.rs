use std::path::Path;
use std::process::{Command, Output};

fn ifa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ifa")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_SPEC: &str = r#"{"n_train": 64, "n_dev": 24, "n_test": 24}"#;
const TINY_CONFIG: &str = r#"{
  "encoder": {"d_model": 16, "n_heads": 2, "d_head": 8, "n_layers": 1, "ffn_dim": 16},
  "train": {"n_epochs": 2, "batch_size": 16},
  "seeds": [0, 1],
  "shuffle_seed": 5
}"#;

fn small_data(root: &Path) -> std::path::PathBuf {
    let spec = root.join("spec_in.json");
    std::fs::write(&spec, SMALL_SPEC).unwrap();
    let data = root.join("data");
    let o = ifa(&["gen-data", "--out", p(&data), "--config", p(&spec)]);
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

#[test]
fn gen_data_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_data(dir.path());
    let b = dir.path().join("again");
    let o = ifa(&["gen-data", "--out", p(&b), "--config", p(&dir.path().join("spec_in.json"))]);
    assert!(o.status.success());
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "spec.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{}", f);
    }
    let c = dir.path().join("other");
    assert!(ifa(&["gen-data", "--out", p(&c), "--config", p(&dir.path().join("spec_in.json")), "--seed", "3"]).status.success());
    assert_ne!(std::fs::read(a.join("train.jsonl")).unwrap(), std::fs::read(c.join("train.jsonl")).unwrap());
}

#[test]
fn malformed_spec_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"background_rate": 1.5}"#).unwrap();
    let o = ifa(&["gen-data", "--out", p(&dir.path().join("d")), "--config", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("background_rate"), "{}", stderr(&o));

    std::fs::write(&bad, r#"{"n_trian": 5}"#).unwrap();
    let o = ifa(&["gen-data", "--out", p(&dir.path().join("d")), "--config", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_trian"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nowhere");
    let out = dir.path().join("r.json");
    for args in [
        vec!["shuffle-exp", "--data", p(&nowhere), "--out", p(&out)],
        vec!["ablation", "--data", p(&nowhere), "--out", p(&out)],
        vec!["eval", "--data", p(&nowhere), "--checkpoint", p(&nowhere), "--out", p(&out)],
    ] {
        let o = ifa(&args);
        assert_eq!(o.status.code(), Some(1), "{:?}: {}", args, stderr(&o));
    }
    assert_eq!(ifa(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(ifa(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_eval_trace_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let ckpt = dir.path().join("run").join("model.json");
    let o = ifa(&["train", "--data", p(&data), "--out", p(&ckpt), "--config", p(&cfg), "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("run").join("model.history.json").exists());

    let metrics = dir.path().join("metrics.json");
    let o = ifa(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&metrics), "--split", "dev"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m["n_samples"], 24);
    assert_eq!(m["split"], "dev");
    assert_eq!(m["model_seed"], 2);
    for key in ["accuracy", "precision", "recall", "micro_f1", "per_relation", "config"] {
        assert!(m.get(key).is_some(), "{}", key);
    }

    let test: Vec<serde_json::Value> = std::fs::read_to_string(data.join("test.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let id = test[0]["id"].as_u64().unwrap().to_string();
    let trace = dir.path().join("trace");
    let o = ifa(&["trace", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&trace), "--ids", &id, "--svg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files: Vec<String> = std::fs::read_dir(&trace).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    // one layer, two heads, csv + svg, plus the summary
    assert_eq!(files.len(), 5, "{:?}", files);
    assert!(files.contains(&format!("sample{}_layer0_head1.csv", id)));

    let o = ifa(&["trace", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&trace), "--ids", "987654321"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("987654321"));

    let corrupt = dir.path().join("corrupt.json");
    std::fs::write(&corrupt, "{\"format_version\": 1}").unwrap();
    let o = ifa(&["eval", "--data", p(&data), "--checkpoint", p(&corrupt), "--out", p(&metrics)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn experiment_reports_rerun_byte_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let o = ifa(&["ablation", "--data", p(&data), "--out", p(out), "--config", p(&cfg), "--seeds", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a.timings.json").exists());

    // a report doubles as the config that reproduces it
    let c = dir.path().join("c.json");
    let o = ifa(&["ablation", "--data", p(&data), "--out", p(&c), "--config", p(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&a).unwrap()).unwrap();
    assert_eq!(report["arms"].as_array().unwrap().len(), 3);
    assert_eq!(report["config"]["seeds"], serde_json::json!([3]));
}

#[test]
fn shuffle_exp_reports_all_arms() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = dir.path().join("shuffle.json");
    let o = ifa(&["shuffle-exp", "--data", p(&data), "--out", p(&out), "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["experiment"], "shuffle");
    assert_eq!(report["arms"].as_array().unwrap().len(), 12);
    assert_eq!(report["summary"].as_array().unwrap().len(), 6);
}
