use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aste_core::corpus::{read_sidecar, SPLITS};
use aste_core::{checkpoint, fixture_dir, Device, RunConfig};

fn aste(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aste"))
        .args(args)
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

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A copy of the fixture's raw splits with parser output in a separate directory.
fn raw_corpus(root: &Path) -> (PathBuf, PathBuf) {
    let raw = root.join("raw");
    let parses = root.join("parses");
    fs::create_dir_all(&raw).unwrap();
    fs::create_dir_all(&parses).unwrap();
    for split in SPLITS {
        let name = format!("{split}_triplets.txt");
        fs::copy(fixture_dir().join(&name), raw.join(&name)).unwrap();
        fs::copy(
            fixture_dir().join(format!("{split}.deps.jsonl")),
            parses.join(format!("{split}.jsonl")),
        )
        .unwrap();
    }
    (raw, parses)
}

fn short_config(dir: &Path, max_steps: usize) -> PathBuf {
    let cfg = RunConfig {
        run_name: "cli".into(),
        max_steps: Some(max_steps),
        epochs: 4,
        eval_every: 1,
        ..RunConfig::toy()
    };
    let path = dir.join("run.json");
    fs::write(&path, cfg.to_json_pretty()).unwrap();
    path
}

#[test]
fn preprocess_of_an_empty_directory_reports_no_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = aste(&["preprocess", "--data-dir", s(dir.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no `<split>_triplets.txt` files found"), "{}", stderr(&o));
}

#[test]
fn preprocess_writes_sidecars_and_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let (raw, parses) = raw_corpus(dir.path());
    let out = dir.path().join("processed");
    let o = aste(&[
        "preprocess",
        "--data-dir",
        s(&raw),
        "--parser-output",
        s(&parses),
        "--out-dir",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let train_row = table.lines().find(|l| l.starts_with("train")).unwrap();
    assert_eq!(train_row.split_whitespace().collect::<Vec<_>>(), ["train", "1", "8", "6", "10", "15"]);
    for split in SPLITS {
        let written = read_sidecar(&out.join(format!("{split}.deps.jsonl"))).unwrap();
        let original = read_sidecar(&fixture_dir().join(format!("{split}.deps.jsonl"))).unwrap();
        assert_eq!(written, original);
        assert!(out.join(format!("{split}_triplets.txt")).exists());
    }
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["train"]["triplets"], 15);
}

#[test]
fn preprocess_reads_conll_parser_output() {
    let dir = tempfile::tempdir().unwrap();
    let (raw, parses) = raw_corpus(dir.path());
    for split in SPLITS {
        let records = read_sidecar(&parses.join(format!("{split}.jsonl"))).unwrap();
        fs::remove_file(parses.join(format!("{split}.jsonl"))).unwrap();
        let mut conll = String::new();
        for r in records {
            conll += "# sent\n";
            for (i, tok) in r.tokens.iter().enumerate() {
                conll += &format!("{}\t{tok}\t_\t_\t_\t_\t{}\t{}\t_\t_\n", i + 1, r.heads[i], r.labels[i]);
            }
            conll += "\n";
        }
        fs::write(parses.join(format!("{split}.conllu")), conll).unwrap();
    }
    let out = dir.path().join("processed");
    let o = aste(&["preprocess", "--data-dir", s(&raw), "--parser-output", s(&parses), "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let written = read_sidecar(&out.join("dev.deps.jsonl")).unwrap();
    assert_eq!(written, read_sidecar(&fixture_dir().join("dev.deps.jsonl")).unwrap());
}

#[test]
fn malformed_input_is_reported_with_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let (raw, _) = raw_corpus(dir.path());
    let path = raw.join("dev_triplets.txt");
    let mut text = fs::read_to_string(&path).unwrap();
    text += "no separator here\n";
    fs::write(&path, &text).unwrap();
    let line = text.lines().count();
    let o = aste(&["preprocess", "--data-dir", s(&raw)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains(&format!("dev_triplets.txt:{line}")), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_stop_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"learning_rate": 0.001, "learnign_rate": 0.1}"#).unwrap();
    let runs = dir.path().join("runs");
    let o = aste(&["train", "--config", s(&cfg), "--data-dir", s(&fixture_dir()), "--out-dir", s(&runs)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learnign_rate"), "{}", stderr(&o));
    assert!(!runs.exists());
}

#[test]
fn train_eval_and_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), 4);
    let runs = dir.path().join("runs");
    let o = aste(&["train", "--config", s(&cfg), "--data-dir", s(&fixture_dir()), "--out-dir", s(&runs)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["steps"], 4);
    let ckpt = runs.join("cli/best.ckpt");

    let reports = dir.path().join("reports");
    let o = aste(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data-dir",
        s(&fixture_dir()),
        "--split",
        "dev",
        "--out-dir",
        s(&reports),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("F1"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(reports.join("eval_dev.json")).unwrap()).unwrap();
    assert!(report["f1"].as_f64().is_some());
    assert_eq!(report["gold"], 3);
    assert!(RunConfig::from_file(&reports.join("config.json")).is_ok());

    let input = dir.path().join("input.txt");
    fs::write(&input, "The price is reasonable .\nService was slow and rude .\n").unwrap();
    let sidecar = dir.path().join("input.deps.jsonl");
    let all = fs::read_to_string(fixture_dir().join("train.deps.jsonl")).unwrap();
    let lines: Vec<&str> = all.lines().collect();
    fs::write(&sidecar, format!("{}\n{}\n", lines[0], lines[2])).unwrap();
    let preds = dir.path().join("preds.jsonl");
    let o = aste(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&input),
        "--sidecar",
        s(&sidecar),
        "--output",
        s(&preds),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> = fs::read_to_string(&preds)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["sentence_id"], 1);
    assert!(rows[0]["triplets"].is_array());

    // the same parses piped through an external command
    let o = aste(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&input),
        "--parser-cmd",
        &format!("cat {}", s(&sidecar)),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), fs::read_to_string(&preds).unwrap());
}

#[test]
fn eval_without_a_checkpoint_fails_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let reports = dir.path().join("reports");
    let o = aste(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("missing.ckpt")),
        "--data-dir",
        s(&fixture_dir()),
        "--out-dir",
        s(&reports),
    ]);
    assert!(!o.status.success());
    assert!(!reports.exists());
}

#[test]
fn rerunning_from_the_snapshot_reproduces_the_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), 3);
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let o = aste(&["train", "--config", s(&cfg), "--data-dir", s(&fixture_dir()), "--out-dir", s(&first)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let snapshot = first.join("cli/config.json");
    let o = aste(&["train", "--config", s(&snapshot), "--data-dir", s(&fixture_dir()), "--out-dir", s(&second)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let load = |root: &Path| checkpoint::load(&root.join("cli/best.ckpt"), &Device::Cpu).unwrap().store.tensors();
    let (a, b) = (load(&first), load(&second));
    for (name, t) in &a {
        let x = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let y = b[name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn ablate_runs_all_eight_configurations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), 2);
    let runs = dir.path().join("runs");
    let o = aste(&["ablate", "--config", s(&cfg), "--data-dir", s(&fixture_dir()), "--out-dir", s(&runs)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> = fs::read_to_string(runs.join("ablation.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r["status"] == "ok"));
    for r in &rows {
        let name = r["ablation"].as_str().unwrap();
        assert!(runs.join(format!("cli_{name}/best.ckpt")).exists(), "{name}");
    }
}
