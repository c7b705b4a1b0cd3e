use std::path::Path;
use std::process::Command;

use morphforge_cli::commands::{cmd_dataset, cmd_morph, cmd_synth};
use morphforge_cli::JobConfig;
use morphforge_core::imaging::load_image;

fn config(dir: &Path, extra: &[(&str, &str)]) -> JobConfig {
    let mut over = vec![
        ("out_dir".to_string(), serde_json::to_string(dir).unwrap()),
        ("synth.count".to_string(), "40".to_string()),
        ("synth.size".to_string(), "96".to_string()),
    ];
    over.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    JobConfig::load(None, &over).unwrap()
}

fn morphforge(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_morphforge"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn morphing_a_face_with_itself_returns_it() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.tsv");
    std::fs::write(&pairs, "face0003\tface0003\n").unwrap();
    let cfg = config(dir.path(), &[("morph.pairs", &serde_json::to_string(&pairs).unwrap())]);
    cmd_synth(&cfg).unwrap();
    let records = cmd_morph(&cfg).unwrap();
    assert_eq!(records.len(), 1);
    let morph = load_image(dir.path().join("morphs").join(&records[0].output)).unwrap();
    let face = load_image(dir.path().join("faces/face0003.png")).unwrap();
    assert_eq!(morph, face);
}

#[test]
fn naive_regime_is_half_genuine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        &[
            ("synth.count", "80"),
            ("synth.databases", "1"),
            ("dataset.train_total", "100"),
            ("dataset.augment", "false"),
        ],
    );
    cmd_synth(&cfg).unwrap();
    let summary = cmd_dataset(&cfg).unwrap();
    assert_eq!(summary.train, 100);
    let text = std::fs::read_to_string(dir.path().join("dataset/train.jsonl")).unwrap();
    let kinds: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds.len(), 100);
    assert_eq!(kinds.iter().filter(|k| *k == "genuine").count(), 50);
    assert_eq!(kinds.iter().filter(|k| *k == "complete_morph").count(), 50);
}

#[test]
fn unknown_config_keys_exit_with_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = morphforge(dir.path(), &["--set", "train.nonsense=1", "config"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert_eq!(err["code"], 2);
}

#[test]
fn missing_model_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = morphforge(dir.path(), &["inspect", "no-such-model.mfnn"]);
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "data");
    assert!(err["message"].as_str().unwrap().contains("no-such-model.mfnn"), "{err}");
}

#[test]
fn effective_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = morphforge(dir.path(), &["--seed", "9", "--set", "dataset.regime=complex", "config"]);
    assert!(out.status.success());
    let path = dir.path().join("job.json");
    std::fs::write(&path, &out.stdout).unwrap();
    let again = morphforge(dir.path(), &["--config", path.to_str().unwrap(), "config"]);
    assert_eq!(out.stdout, again.stdout);
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["seed"], 9);
    assert_eq!(cfg["dataset"]["regime"], "complex");
}
