use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
height = 32
width = 32
base_train = 6
test_size = 3
track_curves = true

[arch]
encoder_widths = [3, 4]
feature_channels = 3
embedding_dim = 2

[base_tuning]
data_strategy = "full"
freeze_shared = false
epochs = 2
warmup_epochs = 1
batch_size = 4

[tuning]
epochs = 2
warmup_epochs = 0
batch_size = 4

[[rounds]]
pool = "base"
n_select = 2
classes_to_revise = ["stomach", "aorta"]

[[rounds]]
pool = "fresh"
pool_size = 4
n_select = 3
classes_to_revise = ["stomach", "aorta"]

[[regimes]]
name = "hybrid_freeze"
data_strategy = "hybrid"
freeze_shared = true

[[regimes]]
name = "full"
data_strategy = "full"
freeze_shared = false
"#;

fn ctune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctune"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ctune(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    (dir, config)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_exit_codes() {
    assert_eq!(ctune(&["--help"]).status.code(), Some(0));
    assert_eq!(ctune(&["loop", "--help"]).status.code(), Some(0));
    assert_eq!(ctune(&["loop", "--bogus"]).status.code(), Some(1));
    assert_eq!(ctune(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ctune(&[]).status.code(), Some(1));
}

#[test]
fn error_exit_codes() {
    let (dir, config) = setup();
    let missing = dir.path().join("nope.ckpt");
    let out = ctune(&[
        "evaluate",
        "--config",
        s(&config),
        "--checkpoint",
        s(&missing),
        "--data",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, TINY.replace("n_select = 3", "n_select = 9")).unwrap();
    let out = ctune(&[
        "gen-data",
        "--config",
        s(&bad),
        "--out",
        s(&dir.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let scores = dir.path().join("scores.csv");
    fs::write(&scores, "scan_id,u,c,o,importance\na,0.1,0.9,0,0.5\n").unwrap();
    let out = ctune(&["select", "--scores", s(&scores), "--k", "2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn step_by_step_round() {
    let (dir, config) = setup();
    let c = s(&config);
    let p = |name: &str| dir.path().join(name);
    ok(&["gen-data", "--config", c, "--out", s(&p("data"))]);
    for split in ["base", "test", "pool2"] {
        assert!(p("data").join(split).join("manifest.json").exists());
    }
    let base = p("data").join("base");
    let digest = ok(&[
        "train-base",
        "--config",
        c,
        "--data",
        s(&base),
        "--out",
        s(&p("base.ckpt")),
        "--log",
        s(&p("base.jsonl")),
    ]);
    fs::write(p("emb.json"), r#"{"liver": [0.6, -0.8]}"#).unwrap();
    let embedded = ok(&[
        "train-base",
        "--config",
        c,
        "--data",
        s(&base),
        "--out",
        s(&p("emb.ckpt")),
        "--embeddings",
        s(&p("emb.json")),
    ]);
    assert_ne!(digest, embedded);
    fs::write(p("bad.json"), r#"{"liver": [1.0]}"#).unwrap();
    let bad = ctune(&[
        "train-base",
        "--config",
        c,
        "--data",
        s(&base),
        "--out",
        s(&p("bad.ckpt")),
        "--embeddings",
        s(&p("bad.json")),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    ok(&[
        "infer",
        "--config",
        c,
        "--checkpoint",
        s(&p("base.ckpt")),
        "--data",
        s(&base),
        "--out",
        s(&p("inferred")),
    ]);
    ok(&[
        "score",
        "--config",
        c,
        "--checkpoint",
        s(&p("base.ckpt")),
        "--data",
        s(&p("inferred")),
        "--classes",
        "stomach,aorta",
        "--out",
        s(&p("scores.csv")),
    ]);

    let selected = ok(&["select", "--scores", s(&p("scores.csv")), "--k", "2"]);
    let ids: Vec<&str> = selected.lines().collect();
    let table = fs::read_to_string(p("scores.csv")).unwrap();
    let mut rows: Vec<(String, f64)> = table
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[4].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 6);
    rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    assert_eq!(
        ids,
        rows.iter()
            .take(2)
            .map(|r| r.0.as_str())
            .collect::<Vec<_>>()
    );

    fs::write(p("ids.txt"), &selected).unwrap();
    ok(&[
        "revise",
        "--config",
        c,
        "--data",
        s(&p("inferred")),
        "--ids",
        s(&p("ids.txt")),
        "--classes",
        "stomach,aorta",
        "--out",
        s(&p("revised")),
    ]);
    ok(&[
        "merge",
        "--config",
        c,
        "--data",
        s(&p("revised")),
        "--out",
        s(&p("merged")),
    ]);
    let tuned = ok(&[
        "tune",
        "--config",
        c,
        "--checkpoint",
        s(&p("base.ckpt")),
        "--data",
        s(&p("merged")),
        "--classes",
        "stomach,aorta",
        "--strategy",
        "hybrid",
        "--out",
        s(&p("tuned.ckpt")),
    ]);
    assert!(tuned.contains("scans per epoch: 2"), "{tuned}");
    let dsc = ok(&[
        "evaluate",
        "--config",
        c,
        "--checkpoint",
        s(&p("tuned.ckpt")),
        "--data",
        s(&p("data").join("test")),
    ]);
    assert!(dsc.contains("\"aorta\""), "{dsc}");
    let manifest = fs::read_to_string(p("merged").join("manifest.json")).unwrap();
    assert!(manifest.contains("\"hybrid\"") && manifest.contains("expert_revised"));
}

#[test]
fn loop_and_report() {
    let (dir, config) = setup();
    let run = dir.path().join("runs").join("r1");
    let first = ok(&["loop", "--config", s(&config), "--out", s(&run)]);
    for f in [
        "rounds.jsonl",
        "scores.csv",
        "report.csv",
        "summary.json",
        "checkpoints/base.ckpt",
        "checkpoints/hybrid_freeze.round2.ckpt",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(!run.join(".lock").exists());
    assert_eq!(fs::read_to_string(run.join("report.csv")).unwrap(), first);

    let run2 = dir.path().join("runs").join("r2");
    ok(&["loop", "--config", s(&config), "--out", s(&run2)]);
    assert_eq!(
        fs::read(run.join("report.csv")).unwrap(),
        fs::read(run2.join("report.csv")).unwrap()
    );

    let out = dir.path().join("report");
    let listed = ok(&["report", "--runs", s(&run), s(&run2), "--out", s(&out)]);
    assert!(listed.contains("curves.csv"));
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(curves.lines().count() > 1);
    assert!(out.join("r1_rounds_new.svg").exists());
    assert!(out.join("r1_hybrid_freeze_epochs.svg").exists());
    let again = dir.path().join("report2");
    ok(&["report", "--runs", s(&run), s(&run2), "--out", s(&again)]);
    assert_eq!(
        fs::read(out.join("curves.csv")).unwrap(),
        fs::read(again.join("curves.csv")).unwrap()
    );

    fs::write(run.join(".lock"), "1").unwrap();
    assert_eq!(
        ctune(&["loop", "--config", s(&config), "--out", s(&run)])
            .status
            .code(),
        Some(2)
    );
}
