mod common;

use std::path::Path;
use std::process::{Command, Output};

fn physjoint(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physjoint"))
        .args(args)
        .env("PHYSJOINT_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, common::TINY).unwrap();
    let cfg = cfg.to_str().unwrap();

    let o = physjoint(&root, &["-c", cfg, "gen-data"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(
        root.join("tiny/data/index.json").is_file(),
        "output root taken from the environment"
    );
    let o = physjoint(&root, &["-c", cfg, "gen-data"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("skipped"));

    // Needs encode-percep and curate first.
    let o = physjoint(&root, &["-c", cfg, "train-teacher"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-teacher"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[backbone]\nheads = 0\n").unwrap();
    assert_eq!(
        code(&physjoint(
            &root,
            &["-c", bad.to_str().unwrap(), "gen-data"]
        )),
        2
    );
    assert_eq!(
        code(&physjoint(&root, &["-c", "/nonexistent.toml", "gen-data"])),
        2
    );
    assert_eq!(code(&physjoint(&root, &["frobnicate"])), 2);
    assert_eq!(
        code(&physjoint(
            &root,
            &["-c", cfg, "run-pipeline", "--skip-to", "nowhere"]
        )),
        2
    );
    assert_eq!(
        code(&physjoint(
            &root,
            &["-c", cfg, "ablate", "--axis", "colour"]
        )),
        2
    );
    assert_eq!(code(&physjoint(&root, &["--help"])), 0);
}

#[test]
fn standalone_curation() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, common::TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&physjoint(&root, &["-c", cfg, "gen-data"])), 0);

    let scores = root.join("tiny/data/scores.ndjson");
    let report = dir.path().join("out/report");
    let args = [
        "curate",
        "--in",
        scores.to_str().unwrap(),
        "--tau",
        "4",
        "--n-out",
        "5",
        "--seed",
        "9",
        "--report",
        report.to_str().unwrap(),
    ];
    let o = physjoint(&root, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for ext in ["json", "ndjson", "svg", "png"] {
        assert!(report.with_extension(ext).is_file(), "{ext}");
    }
    let kept = physjoint::dataset::read_records(&report.with_extension("ndjson")).unwrap();
    assert_eq!(kept.len(), 5);
    let first = std::fs::read(report.with_extension("ndjson")).unwrap();
    assert_eq!(code(&physjoint(&root, &args)), 0);
    assert_eq!(
        std::fs::read(report.with_extension("ndjson")).unwrap(),
        first
    );

    let mut bad = args.to_vec();
    bad[4] = "7";
    assert_eq!(code(&physjoint(&root, &bad)), 2);
    assert_eq!(code(&physjoint(&root, &["curate", "--in", "x.ndjson"])), 2);
    let missing = [
        "curate",
        "--in",
        "/nonexistent.ndjson",
        "--report",
        report.to_str().unwrap(),
    ];
    assert_eq!(code(&physjoint(&root, &missing)), 3);
}
