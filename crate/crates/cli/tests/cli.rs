use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attcap::attention::{REGION_BIAS, REGION_STATE, WORD_REGION};
use attcap::checkpoint::load;

fn attcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attcap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = attcap(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    ok(&[
        "gen",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&path),
    ]);
    path
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--out",
        s(out),
        "--steps",
        "20",
        "--stage2-steps",
        "2",
        "--warmup-steps",
        "2",
        "--batch",
        "4",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_is_deterministic_and_validates_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.jsonl", 5, 3);
    let b = gen(dir.path(), "b.jsonl", 5, 3);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 5);
    assert!(dir.path().join("a.jsonl.manifest.json").exists());
    let empty = gen(dir.path(), "e.jsonl", 0, 3);
    assert!(fs::read(&empty).unwrap().is_empty());
    assert_eq!(attcap(&["gen", "--n", "3"]).status.code(), Some(2));
    assert_eq!(
        attcap(&["train", "--data", "x", "--out", "y", "--ablation", "bogus"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn ablations_keep_their_zeroed_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "train.jsonl", 12, 1);
    let wh = dir.path().join("wh.ckpt");
    train(&data, &wh, &["--ablation", "wh"]);
    let (m, _) = load(&wh).unwrap();
    for name in [WORD_REGION, REGION_STATE, REGION_BIAS] {
        assert!(
            m.params.get(name).unwrap().data().iter().all(|&v| v == 0.0),
            "{name}"
        );
    }
    let whwr = dir.path().join("whwr.ckpt");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&whwr),
        "--ablation",
        "wh+wr",
        "--steps",
        "100",
        "--stage2-steps",
        "0",
        "--warmup-steps",
        "0",
        "--batch",
        "4",
    ]);
    let (m, _) = load(&whwr).unwrap();
    assert!(m
        .params
        .get(REGION_STATE)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
    assert!(m
        .params
        .get(WORD_REGION)
        .unwrap()
        .data()
        .iter()
        .any(|&v| v != 0.0));
}

#[test]
fn train_eval_viz_and_sweep_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "train.jsonl", 12, 2);
    let held = gen(dir.path(), "held.jsonl", 3, 99);
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    train(&data, &a, &["--seed", "4"]);
    train(&data, &b, &["--seed", "4"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a.ckpt.loss.csv")).unwrap(),
        fs::read(dir.path().join("b.ckpt.loss.csv")).unwrap()
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a.ckpt.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 4);

    let (greedy, beam1) = (
        dir.path().join("greedy.json"),
        dir.path().join("beam1.json"),
    );
    ok(&[
        "eval",
        "--ckpt",
        s(&a),
        "--data",
        s(&held),
        "--metrics",
        s(&greedy),
        "--beam",
        "0",
    ]);
    ok(&[
        "eval",
        "--ckpt",
        s(&a),
        "--data",
        s(&held),
        "--metrics",
        s(&beam1),
        "--beam",
        "1",
    ]);
    assert_eq!(fs::read(&greedy).unwrap(), fs::read(&beam1).unwrap());

    let first_id = {
        let line = fs::read_to_string(&held)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        v["id"].as_str().unwrap().to_string()
    };
    let viz = dir.path().join("viz");
    ok(&[
        "viz",
        "--ckpt",
        s(&a),
        "--data",
        s(&held),
        "--id",
        &first_id,
        "--out",
        s(&viz),
        "--max-len",
        "6",
    ]);
    let ppm = fs::read_dir(&viz)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "ppm")
        .count();
    let svg = fs::read_dir(&viz)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "svg")
        .count();
    assert!((1..=6).contains(&ppm));
    assert_eq!(ppm, svg);
    let bad = attcap(&[
        "viz",
        "--ckpt",
        s(&a),
        "--data",
        s(&held),
        "--id",
        "nope",
        "--out",
        s(&viz),
    ]);
    assert_eq!(bad.status.code(), Some(1));

    let csv = dir.path().join("sweep.csv");
    ok(&[
        "sweep",
        "--ckpt",
        s(&a),
        "--data",
        s(&held),
        "--strides",
        "1,2,4,8",
        "--out",
        s(&csv),
    ]);
    let rows: Vec<String> = fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let regions: Vec<&str> = rows[1..]
        .iter()
        .map(|r| r.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(regions, vec!["64", "16", "4", "1"]);
    assert_eq!(
        attcap(&[
            "sweep",
            "--ckpt",
            s(&a),
            "--data",
            s(&held),
            "--out",
            s(&csv)
        ])
        .status
        .code(),
        Some(2)
    );
}
