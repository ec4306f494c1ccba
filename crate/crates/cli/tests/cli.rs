use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cattle-clip"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A small, fast configuration for end-to-end runs.
const SMALL: &str = r#"
seed = 3

[synth]
clips_per_category = 5

[training]
total_epochs = 4
warmup_epochs = 1
"#;

fn small_config(dir: &Path) -> String {
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    "small.toml".into()
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        assert!(cli(d, &["--seed", "7", "--out", out, "synth"]).status.success());
    }
    assert!(cli(d, &["--seed", "8", "--out", "c", "synth"]).status.success());
    let read = |o: &str| fs::read(d.join(o).join("manifest.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(read("a").iter().filter(|&&b| b == b'\n').count(), 121);
    let frame = |o: &str| fs::read(d.join(o).join("frames/feeding-000.frames")).unwrap();
    assert_eq!(frame("a"), frame("b"));
    assert_ne!(frame("a"), frame("c"));
    let cfg = fs::read_to_string(d.join("a/effective-config.toml")).unwrap();
    assert!(cfg.contains("seed = 7"));
}

#[test]
fn synth_into_a_file_fails_without_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blocker"), b"x").unwrap();
    let o = cli(dir.path(), &["--out", "blocker/data", "synth"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!dir.path().join("blocker/data/manifest.jsonl").exists());
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["train"]).status.code(), Some(1));
    fs::write(dir.path().join("bad.toml"), "[training]\nlearning_rate = 1.0\n").unwrap();
    let o = cli(dir.path(), &["--config", "bad.toml", "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    assert!(cli(dir.path(), &["--help"]).status.success());
}

fn tracklet_line(frame: u64, track: u64, bbox: [f64; 4], label: &str) -> String {
    format!(
        r#"{{"frame_index": {frame}, "track_id": {track}, "bbox": [{}, {}, {}, {}], "behaviour_label": "{label}"}}"#,
        bbox[0], bbox[1], bbox[2], bbox[3]
    )
}

#[test]
fn curate_reports_every_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut lines: Vec<String> = (0..100).map(|f| tracklet_line(f, 1, [0.1, 0.1, 0.3, 0.3], "feeding")).collect();
    lines.extend((0..20).map(|f| tracklet_line(f, 2, [0.6, 0.6, 0.3, 0.3], "drinking")));
    fs::write(d.join("t.jsonl"), lines.join("\n")).unwrap();
    let o = cli(d, &["--out", "cur", "curate", "--tracklets", "t.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(d.join("cur/report.jsonl")).unwrap();
    // Track 1 spans two windows, track 2 one.
    assert_eq!(report.lines().count(), 3);
    let rows: Vec<serde_json::Value> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let accepted: Vec<bool> = rows.iter().map(|r| r["accepted"].as_bool().unwrap()).collect();
    assert_eq!(accepted, vec![true, true, false]);
    assert_eq!(rows[2]["rule3_temporal"], "fail");
    let manifest = fs::read_to_string(d.join("cur/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
}

#[test]
fn curate_empty_and_malformed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("empty.jsonl"), "").unwrap();
    let o = cli(d, &["--out", "e", "curate", "--tracklets", "empty.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(d.join("e/report.jsonl")).unwrap(), "");

    let good = tracklet_line(0, 1, [0.1, 0.1, 0.3, 0.3], "feeding");
    fs::write(d.join("bad.jsonl"), format!("{good}\n{good}\n{{not json\n")).unwrap();
    let o = cli(d, &["--out", "b", "curate", "--tracklets", "bad.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.jsonl:2:"), "{}", stderr(&o));
}

#[test]
fn train_eval_resume_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    assert!(cli(d, &["--config", &cfg, "--out", "data", "synth"]).status.success());

    let o = cli(d, &["--config", &cfg, "--out", "run", "train", "--manifest", "data/manifest.jsonl", "--no-aug"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let effective = fs::read_to_string(d.join("run/effective-config.toml")).unwrap();
    assert!(effective.contains("augmentation = false"), "{effective}");
    let history = fs::read_to_string(d.join("run/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 4);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["provenance"]["split"], "test");
    assert!(report["provenance"]["checkpoint_id"].as_str().unwrap().len() == 64);

    // Resuming a finished run changes nothing.
    let o = cli(d, &["--config", &cfg, "--out", "run", "train", "--manifest", "data/manifest.jsonl", "--no-aug", "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let again: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(again, report);

    for split in ["val", "test"] {
        let o = cli(d, &["--config", &cfg, "--out", "ev", "eval", "--checkpoint", "run/model.ckpt", "--manifest", "data/manifest.jsonl", "--split", split]);
        assert!(o.status.success(), "{}", stderr(&o));
        let doc: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(d.join(format!("ev/report-{split}.json"))).unwrap()).unwrap();
        assert_eq!(doc["provenance"]["split"], split);
    }

    fs::write(d.join("wide.toml"), format!("{SMALL}\n[model]\nhidden_dim = 48\nheads = 4\n")).unwrap();
    let o = cli(d, &["--config", "wide.toml", "--out", "ev2", "eval", "--checkpoint", "run/model.ckpt", "--manifest", "data/manifest.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("visual.class_embedding: config [1, 48], checkpoint [1, 32]"), "{}", stderr(&o));
}

#[test]
fn fewshot_single_stage_and_category_guard() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = "seed = 1\n[synth]\nclips_per_category = 30\n[fewshot]\nbase_epochs = 6\nfinal_epochs_full = 6\nfinal_epochs_scarce = 6\nwarmup_epochs = 1\n";
    fs::write(d.join("fs.toml"), cfg).unwrap();
    assert!(cli(d, &["--config", "fs.toml", "--out", "data", "synth"]).status.success());
    let o = cli(d, &["--config", "fs.toml", "--out", "fs", "fewshot", "--manifest", "data/manifest.jsonl", "--category", "feeding", "--stage", "base"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("base"));
    assert!(d.join("fs/fewshot/feeding/seed-0/base.json").exists());

    let o = cli(d, &["--config", "fs.toml", "--out", "fs", "fewshot", "--manifest", "data/manifest.jsonl", "--category", "grazing"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cli(d, &["--config", "fs.toml", "--out", "fs", "fewshot", "--manifest", "data/manifest.jsonl", "--n", "5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn inspect_tokens_flags_split_words() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = cli(d, &["--out", "tok", "inspect-tokens"]);
    assert!(o.status.success());
    let rows: Vec<serde_json::Value> = fs::read_to_string(d.join("tok/token-split.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(rows.iter().any(|r| r["word"] == "ruminating" && r["flagged"] == true));

    let o = cli(d, &["--out", "tok2", "inspect-tokens", "--remap"]);
    assert!(o.status.success());
    let text = fs::read_to_string(d.join("tok2/token-split.jsonl")).unwrap();
    assert!(text.contains("\"chewing\""));
    assert!(!text.contains("\"flagged\":true"), "{text}");

    // A byte-pair table that yields "ru", "min", "ating".
    let mut vocab = vec!["<pad>".to_string(), "<|startoftext|>".into(), "<|endoftext|>".into()];
    for c in 'a'..='z' {
        vocab.push(c.to_string());
        vocab.push(format!("{c}</w>"));
    }
    for t in ["ru", "mi", "min", "at", "ati", "atin", "ating</w>"] {
        vocab.push(t.into());
    }
    fs::write(d.join("vocab.txt"), vocab.join("\n")).unwrap();
    fs::write(d.join("merges.txt"), "#version: test\nr u\nm i\nmi n\na t\nat i\nati n\natin g</w>\n").unwrap();
    let o = cli(d, &["--out", "tok3", "inspect-tokens", "--vocab", "vocab.txt", "--merges", "merges.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> = fs::read_to_string(d.join("tok3/token-split.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let rum = rows.iter().find(|r| r["word"] == "ruminating").unwrap();
    assert_eq!(rum["token_count"], 3);
    assert_eq!(rum["flagged"], true);
}
