use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cffn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cffn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cffn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    std::fs::write(
        p("synth.json"),
        r#"{"seed": 4, "n_real": 30, "n_fake": 30}"#,
    )
    .unwrap();
    std::fs::write(
        p("train.json"),
        r#"{"epochs": 2, "batch_size": 8, "lambda": 0.1, "seed": 2,
            "dims": {"d": 8, "d_m": 4, "d_f": 4}}"#,
    )
    .unwrap();

    ok(&[
        "gen-synth",
        "--config",
        s(&p("synth.json")),
        "--out",
        s(&p("a.cfe")),
    ]);
    ok(&[
        "gen-synth",
        "--config",
        s(&p("synth.json")),
        "--out",
        s(&p("b.cfe")),
    ]);
    assert_eq!(
        std::fs::read(p("a.cfe")).unwrap(),
        std::fs::read(p("b.cfe")).unwrap()
    );

    let history = ok(&[
        "train",
        "--data",
        s(&p("a.cfe")),
        "--config",
        s(&p("train.json")),
        "--out",
        s(&p("m.ckpt")),
    ]);
    let epochs: Vec<Value> = history
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(epochs.len(), 2);
    assert_eq!(epochs[1]["epoch"], 1);
    assert_eq!(epochs[0]["eval_split"], "val");

    let eval = ok(&[
        "eval",
        "--data",
        s(&p("a.cfe")),
        "--ckpt",
        s(&p("m.ckpt")),
        "--split",
        "test",
        "--out",
        s(&p("eval.json")),
    ]);
    assert!(eval.starts_with("accuracy "));
    let metrics = read_json(&p("eval.json"));
    let c = &metrics["confusion"];
    let total: u64 = ["tp", "fp", "fn_", "tn"]
        .iter()
        .map(|k| c[k].as_u64().unwrap())
        .sum();
    assert_eq!(total, 6);

    ok(&[
        "gradcheck",
        "--ckpt",
        s(&p("m.ckpt")),
        "--data",
        s(&p("a.cfe")),
        "--samples",
        "20",
        "--out",
        s(&p("gc.json")),
    ]);
    assert_eq!(read_json(&p("gc.json"))["status"], "PASS");

    ok(&[
        "explain",
        "--ckpt",
        s(&p("m.ckpt")),
        "--data",
        s(&p("a.cfe")),
        "--id",
        "synth-000003",
        "--out",
        s(&p("ex.json")),
        "--lambda",
        "0.9999",
    ]);
    let report = read_json(&p("ex.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6 * 8);
    assert!(rows.iter().all(|r| r["part"] == "CANDIDATE"));

    ok(&[
        "sweep",
        "--data",
        s(&p("a.cfe")),
        "--config",
        s(&p("train.json")),
        "--beta",
        "0.4:0.8:0.4",
        "--lambda",
        "0.0:0.1:0.1",
        "--out",
        s(&p("sweep.json")),
    ]);
    let cells = read_json(&p("sweep.json"))["cells"]
        .as_array()
        .unwrap()
        .clone();
    assert_eq!(cells.len(), 4);
    let grid: Vec<(f64, f64)> = cells
        .iter()
        .map(|c| (c["beta"].as_f64().unwrap(), c["lambda"].as_f64().unwrap()))
        .collect();
    assert_eq!(grid, vec![(0.4, 0.0), (0.4, 0.1), (0.8, 0.0), (0.8, 0.1)]);
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cfe");
    let out = cffn(&["eval", "--data", s(&missing), "--ckpt", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = cffn(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    let garbage = dir.path().join("garbage.cfe");
    std::fs::write(&garbage, b"not an archive").unwrap();
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, r#"{"epochs": 1}"#).unwrap();
    let out = cffn(&[
        "train",
        "--data",
        s(&garbage),
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
