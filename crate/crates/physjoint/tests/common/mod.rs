#![allow(dead_code)]

use std::path::Path;

use physjoint::config::ExperimentConfig;

/// A run small enough to go through every stage in a few seconds.
pub const TINY: &str = r#"
name = "tiny"
seed = 3

[world]
clips = 8

[backbone]
width = 16
heads = 2
depth = 2
freq_dim = 8

[stage1]
steps = 10

[distill.train]
steps = 10

[sample]
per_class = 1
steps = 4
"#;

pub fn tiny(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(TINY).unwrap();
    cfg.output_root = root.to_path_buf();
    cfg
}
