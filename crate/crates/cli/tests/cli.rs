use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[run]
name = "tiny"
seeds = [0, 1]

[dataset]
classes = 12
per_class = 10
dim = 8
cluster_std = 0.2

[embedder]
hidden = [16]
embedding_dim = 8

[sampler]
classes_per_batch = 4
instances_per_class = 3

[optimizer]
steps = 12
eval_interval = 6
"#;

fn mdr(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdr"))
        .args(args)
        .env("MDR_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_evaluate_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, SMALL).unwrap();
    let root = dir.path().join("runs");

    let out = mdr(&root, &["train", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("test_recall_at_1"));
    let run = root.join("tiny");
    for f in [
        "config.toml",
        "manifest.json",
        "seed-0/metrics.jsonl",
        "seed-1/checkpoint.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let ckpt = run.join("seed-0/checkpoint.json");
    let out = mdr(
        &root,
        &["evaluate", ckpt.to_str().unwrap(), "test", "--ks", "1,2,4"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["split"], "test");
    assert_eq!(report["step"], 12);
    assert_eq!(report["metrics"]["recall"].as_array().unwrap().len(), 3);

    let out = mdr(&root, &["inspect", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    for key in ["levels", "mu*", "sigma*", "test norms", "param mdr.levels"] {
        assert!(text.contains(key), "inspect output lacks {key}:\n{text}");
    }
}

#[test]
fn manifest_reruns_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, SMALL).unwrap();
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    assert!(mdr(&first, &["train", config.to_str().unwrap()])
        .status
        .success());
    let manifest = first.join("tiny/manifest.json");
    let out = mdr(&second, &["train", manifest.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    for seed in ["seed-0", "seed-1"] {
        let a = std::fs::read(first.join("tiny").join(seed).join("metrics.jsonl")).unwrap();
        let b = std::fs::read(second.join("tiny").join(seed).join("metrics.jsonl")).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn output_root_flag_overrides_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, SMALL.replace("seeds = [0, 1]", "seeds = [3]")).unwrap();
    let flag_root = dir.path().join("flag");
    let out = mdr(
        &dir.path().join("env"),
        &[
            "--output-root",
            flag_root.to_str().unwrap(),
            "train",
            config.to_str().unwrap(),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(flag_root.join("tiny/seed-3/metrics.jsonl").exists());
    assert!(!dir.path().join("env").exists());
}

#[test]
fn matrix_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let configs = dir.path().join("configs");
    std::fs::create_dir(&configs).unwrap();
    std::fs::write(configs.join("a.toml"), SMALL.replace("tiny", "with_mdr")).unwrap();
    let off = SMALL.replace("tiny", "without_mdr")
        + "\n[mdr]\nenabled = false\n\n[loss]\ntrick = false\n";
    std::fs::write(configs.join("b.toml"), off).unwrap();
    let root = dir.path().join("out");

    let out = mdr(&root, &["matrix", configs.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("with_mdr") && stdout(&out).contains("without_mdr"));
    let csv = std::fs::read_to_string(root.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(root.join("summary.txt").exists());
}

#[test]
fn presets_round_trip_through_the_loader() {
    let dir = tempfile::tempdir().unwrap();
    let out = mdr(
        dir.path(),
        &[
            "presets",
            dir.path().to_str().unwrap(),
            "--set",
            "lambda",
            "--steps",
            "5",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "lambda_0.1.toml",
            "lambda_0.2.toml",
            "lambda_0.6.toml",
            "lambda_0.toml"
        ]
    );
    let text = std::fs::read_to_string(dir.path().join("lambda_0.2.toml")).unwrap();
    assert!(text.contains("steps = 5") && text.contains("lambda = 0.2"));
}

#[test]
fn bad_inputs_fail_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[run]\nseeds = []\n").unwrap();
    let out = mdr(dir.path(), &["train", config.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("seed"), "{}", stderr(&out));

    std::fs::write(&config, "[optimizer]\nlearning_rate = 1\n").unwrap();
    let out = mdr(dir.path(), &["train", config.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    let out = mdr(dir.path(), &["evaluate", "missing.json", "test"]);
    assert!(!out.status.success());
    let out = mdr(dir.path(), &["evaluate", "missing.json", "validation"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("validation"));
}
