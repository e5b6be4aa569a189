use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn grasp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grasp"))
        .args(args)
        .env("GRASP_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = grasp(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

/// Small model and schedule, so a full pipeline runs in seconds.
fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.json");
    let config = serde_json::json!({
        "seed": 3,
        "model": {"patch": 4, "dim": 8, "heads": 2, "prototypes": 4, "frozen_width": 8, "decoder_width": 8},
        "train": {"batch_size": 2}
    });
    fs::write(&path, config.to_string()).unwrap();
    path
}

fn pipeline(root: &Path) {
    let cfg = write_config(root);
    let cfg = s(&cfg);
    let (train, test, run) = (root.join("train"), root.join("test"), root.join("run"));
    ok(&[
        "gen",
        "--config",
        cfg,
        "--out",
        s(&train),
        "--n",
        "12",
        "--size",
        "16",
    ]);
    ok(&[
        "gen",
        "--config",
        cfg,
        "--out",
        s(&test),
        "--n",
        "6",
        "--size",
        "16",
        "--split",
        "test",
    ]);
    ok(&[
        "train",
        "--config",
        cfg,
        "--data",
        s(&train),
        "--out",
        s(&run),
        "--steps",
        "6",
        "--log-every",
        "0",
    ]);
    let ckpt = run.join("model.ckpt");
    let common = ["--config", cfg, "--ckpt", s(&ckpt), "--data", s(&test)];
    let eval_out = root.join("eval");
    ok(&[
        &["eval"][..],
        &common,
        &[
            "--out",
            s(&eval_out),
            "--protocol",
            "standard",
            "--two-pass",
        ],
    ]
    .concat());
    ok(&[
        &["ablate"][..],
        &common,
        &["--out", s(&root.join("ablate"))],
    ]
    .concat());
    ok(&[&["probe"][..], &common, &["--out", s(&root.join("probe"))]].concat());
    ok(&[&["stats"][..], &common, &["--out", s(&root.join("stats"))]].concat());
}

#[test]
fn pipeline_writes_expected_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline(tmp.path());
    for f in [
        "train/manifest.json",
        "run/model.ckpt",
        "run/loss.csv",
        "eval/report.json",
        "eval/report.csv",
        "ablate/ablation.csv",
        "ablate/ablation.json",
        "probe/probe.json",
        "probe/probe_pairs.csv",
        "stats/stats.json",
    ] {
        assert!(tmp.path().join(f).is_file(), "missing {f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("eval/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["tag"], "standard");
    assert!(report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["passes"] == 2));
    assert!(report["provenance"]["run"]["config"].is_object());
    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("stats/stats.json")).unwrap())
            .unwrap();
    let (lo, hi) = (
        stats["dbar"]["min"].as_f64().unwrap(),
        stats["dbar"]["max"].as_f64().unwrap(),
    );
    assert!(-1.0 <= lo && lo <= hi && hi <= 1.0);
    let loss = fs::read_to_string(tmp.path().join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().filter(|l| !l.starts_with('#')).count(), 1 + 6);
}

#[test]
fn pipeline_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let strip = |files: Vec<(PathBuf, Vec<u8>)>, root: &Path| -> Vec<(PathBuf, Vec<u8>)> {
        // Outputs embed the absolute paths they were given; compare with those masked.
        let needle = s(root).as_bytes().to_vec();
        files
            .into_iter()
            .map(|(p, bytes)| {
                let mut out = Vec::with_capacity(bytes.len());
                let mut i = 0;
                while i < bytes.len() {
                    if bytes[i..].starts_with(&needle) {
                        out.extend_from_slice(b"<root>");
                        i += needle.len();
                    } else {
                        out.push(bytes[i]);
                        i += 1;
                    }
                }
                (p, out)
            })
            .collect()
    };
    let first = strip(dir_bytes(a.path()), a.path());
    let second = strip(dir_bytes(b.path()), b.path());
    assert_eq!(first.len(), second.len());
    for (x, y) in first.iter().zip(&second) {
        assert!(x == y, "{} differs", x.0.display());
    }
}

#[test]
fn missing_checkpoint_flag_is_a_usage_error() {
    let out = grasp(&["eval", "--data", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreadable_checkpoint_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none.ckpt");
    let out = grasp(&[
        "eval",
        "--ckpt",
        s(&missing),
        "--data",
        s(tmp.path()),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error["));
}

#[test]
fn unknown_config_key_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"trian": {}}"#).unwrap();
    let out = grasp(&[
        "gen",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("d")),
        "--n",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config]"));
}

#[test]
fn sdf_writes_field_and_gate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    ok(&["gen", "--out", s(&data), "--n", "1", "--size", "16"]);
    let out = tmp.path().join("sdf");
    ok(&[
        "sdf",
        "--mask",
        s(&data.join("vis_000000.pgm")),
        "--out",
        s(&out),
        "--grid",
        "4",
    ]);
    for f in ["sdf.csv", "sdf.pgm", "gate.pgm"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
}
