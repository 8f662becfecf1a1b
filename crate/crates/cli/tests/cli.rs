use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "scene": {"height": 32, "width": 32},
  "frozen": {"n_scenes": 4},
  "train": {"iterations": 12, "warmup_iters": 4, "batch_size": 2, "head": {"hidden": 8}},
  "n_train": 4,
  "n_eval": 2
}"#;

fn oodseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oodseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = oodseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the small config and materializes data + frozen model.
fn setup(root: &Path) {
    fs::write(root.join("cfg.json"), SMALL).unwrap();
    let cfg = root.join("cfg.json");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&root.join("data"))]);
    ok(&["fit-frozen", "--config", s(&cfg), "--out", s(&root.join("frozen"))]);
}

fn train(root: &Path, out: &str, extra: &[&str]) {
    let (cfg, data, frozen) = (root.join("cfg.json"), root.join("data"), root.join("frozen"));
    let mut args = vec!["train", "--config", s(&cfg), "--data", s(&data), "--frozen", s(&frozen), "--out"];
    let out = root.join(out);
    args.push(s(&out));
    args.extend_from_slice(extra);
    ok(&args);
}

fn eval(root: &Path, run: &str) -> String {
    let run = root.join(run);
    ok(&[
        "eval",
        "--head",
        s(&run.join("head")),
        "--frozen",
        s(&root.join("frozen")),
        "--data",
        s(&root.join("data")),
        "--out",
        s(&run),
    ]);
    fs::read_to_string(run.join("eval.csv")).unwrap()
}

#[test]
fn untrained_head_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    train(root, "run0", &["--iterations", "0"]);
    let csv = eval(root, "run0");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "scorer,ap,auroc,fpr95,n_pos,n_neg");
    assert_eq!(lines.len(), 8);
    let log = fs::read_to_string(root.join("run0/trainlog.csv")).unwrap();
    assert_eq!(log, "iter,l_a,l_o,n_ood,n_ignored,eta,ms\n");
}

#[test]
fn runs_are_self_describing_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    train(root, "a", &[]);
    train(root, "b", &[]);
    for f in ["trainlog.csv", "config.json", "frozen_digest.txt"] {
        assert_eq!(
            fs::read(root.join("a").join(f)).unwrap(),
            fs::read(root.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(eval(root, "a"), eval(root, "b"));
    let digest = fs::read_to_string(root.join("frozen/digest.txt")).unwrap();
    assert_eq!(fs::read_to_string(root.join("a/frozen_digest.txt")).unwrap(), digest);
    let log = fs::read_to_string(root.join("a/trainlog.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 12);
}

#[test]
fn checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    let cfg = SMALL.replace("\"n_train\"", "\"checkpoint_every\": 5, \"n_train\"");
    fs::write(root.join("cfg.json"), cfg).unwrap();
    train(root, "ck", &[]);
    assert!(root.join("ck/checkpoints/iter_000005/manifest.txt").exists());
    assert!(root.join("ck/checkpoints/iter_000010/proj.weight.tnsr").exists());
    assert!(!root.join("ck/checkpoints/iter_000015").exists());
}

#[test]
fn score_writes_map_and_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    train(root, "run", &[]);
    let map = root.join("score/map.tnsr");
    let heat = root.join("score/heat.pgm");
    ok(&[
        "score",
        "--head",
        s(&root.join("run/head")),
        "--frozen",
        s(&root.join("frozen")),
        "--image",
        s(&root.join("data/eval/0000.ppm")),
        "--scorer",
        "tore",
        "--lambda",
        "0.5",
        "--out",
        s(&map),
        "--heatmap",
        s(&heat),
    ]);
    let bytes = fs::read(&map).unwrap();
    assert_eq!(&bytes[..4], b"TNSR");
    let pgm = fs::read(&heat).unwrap();
    assert!(pgm.starts_with(b"P5"));
    assert!(!pgm[pgm.len() - 32 * 32..].contains(&255));
}

#[test]
fn ablate_and_sweep_emit_documented_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    setup(root);
    let (cfg, data, frozen) = (root.join("cfg.json"), root.join("data"), root.join("frozen"));
    let common = ["--config", s(&cfg), "--data", s(&data), "--frozen", s(&frozen)];
    let mut args = vec!["ablate"];
    args.extend_from_slice(&common);
    let out = root.join("ablate");
    args.extend_from_slice(&["--out", s(&out)]);
    ok(&args);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let arms: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(arms, ["jem", "tae", "tore", "both", "static_margin", "dynamic_margin"]);

    let mut args = vec!["sweep"];
    args.extend_from_slice(&common);
    let out = root.join("sweep");
    args.extend_from_slice(&["--param", "gamma", "--values", "5,15", "--out", s(&out)]);
    ok(&args);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "param,value,ap,auroc,fpr95");
    assert!(lines[1].starts_with("gamma,5,") && lines[2].starts_with("gamma,15,"));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // usage
    assert_eq!(oodseg(&["train"]).status.code(), Some(2));
    // unknown config key
    fs::write(root.join("bad.json"), r#"{"train": {"iterations": 1, "learning_rate": 1}}"#).unwrap();
    let out = oodseg(&["gen-data", "--config", s(&root.join("bad.json")), "--out", s(&root.join("x"))]);
    assert_eq!(out.status.code(), Some(3));
    // invalid value
    let out = oodseg(&["gen-data", "--out", s(&root.join("x")), "--warmup", "5", "--iterations", "1"]);
    assert_eq!(out.status.code(), Some(3));
    // missing artifact
    let out = oodseg(&[
        "eval",
        "--head",
        s(&root.join("nope")),
        "--frozen",
        s(&root.join("nope")),
        "--data",
        s(&root.join("nope")),
        "--out",
        s(&root.join("o")),
    ]);
    assert_eq!(out.status.code(), Some(4));
    // digest mismatch between a head and a refitted frozen model
    setup(root);
    train(root, "run", &[]);
    let refit = root.join("frozen2");
    let cfg2 = SMALL.replace("\"n_scenes\": 4", "\"n_scenes\": 4, \"seed\": 8");
    fs::write(root.join("cfg2.json"), cfg2).unwrap();
    ok(&["fit-frozen", "--config", s(&root.join("cfg2.json")), "--out", s(&refit)]);
    let out = oodseg(&[
        "eval",
        "--head",
        s(&root.join("run/head")),
        "--frozen",
        s(&refit),
        "--data",
        s(&root.join("data")),
        "--out",
        s(&root.join("o")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    // tampered frozen digest
    fs::write(refit.join("digest.txt"), "deadbeef\n").unwrap();
    let out = oodseg(&[
        "train",
        "--config",
        s(&root.join("cfg.json")),
        "--data",
        s(&root.join("data")),
        "--frozen",
        s(&refit),
        "--out",
        s(&root.join("t")),
    ]);
    assert_eq!(out.status.code(), Some(4));
}
