mod common;

use physjoint::config::{ExperimentConfig, Modality};
use physjoint_core::bct::Arch;

#[test]
fn empty_file_gives_the_defaults() {
    assert_eq!(
        ExperimentConfig::from_toml("").unwrap(),
        ExperimentConfig::default()
    );
}

#[test]
fn toml_roundtrip() {
    let mut cfg = ExperimentConfig::from_toml(common::TINY).unwrap();
    cfg.arch = Arch::Spatial;
    cfg.modality = Modality::Tracks;
    cfg.teacher.link_blocks = Some(vec![2]);
    cfg.curation.n_out = Some(12);
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn partial_tables_keep_their_own_defaults() {
    let d = ExperimentConfig::default();
    let cfg = ExperimentConfig::from_toml("[distill.train]\nsteps = 7\n[stage1.optim]\nlr = 0.5\n")
        .unwrap();
    assert_eq!(cfg.distill.train.steps, 7);
    assert_eq!(cfg.distill.train.optim, d.distill.train.optim);
    assert_eq!(cfg.distill.lambda, d.distill.lambda);
    assert_eq!(cfg.stage1.train.optim.lr, 0.5);
    assert_eq!(cfg.stage1.train.steps, d.stage1.train.steps);
    assert!(cfg.distill.train.optim.lr < cfg.stage1.train.optim.lr);
}

#[test]
fn bad_configs_are_config_errors() {
    for text in [
        "nme = \"x\"",
        "[stage1]\nstepz = 3",
        "[sample]\nguidanse = 2.0",
        "[world]\nclips = 1",
        "[backbone]\nwidth = 30\nheads = 4",
        "[curation]\ntau = 0.5",
        "[curation]\ntau = 6",
        "arch = \"diagonal\"",
        "modality = \"depth\"",
        "validation_fraction = 1.0",
        "[teacher]\nlink_blocks = [99]",
        "[world]\nframes = 7",
        "name = \"a/b\"",
        "seed = ",
    ] {
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        assert!(err.is_config(), "{text:?}: {err}");
        assert_eq!(err.exit_code(), 2);
    }
}

#[test]
fn unknown_keys_are_named() {
    let err = ExperimentConfig::from_toml("[stage1]\nstepz = 3")
        .unwrap_err()
        .to_string();
    assert!(err.contains("stage1.stepz"), "{err}");
}

#[test]
fn load_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.toml");
    std::fs::write(&path, "[world]\nclips = 0\n").unwrap();
    let err = ExperimentConfig::load(&path).unwrap_err().to_string();
    assert!(err.contains("x.toml"), "{err}");
    assert!(ExperimentConfig::load(&dir.path().join("missing.toml"))
        .unwrap_err()
        .is_config());
}
