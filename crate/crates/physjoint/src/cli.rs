//! Command-line front end.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::ablate::{ablate, AblationRow, AblationTable, Axis};
use crate::config::{ExperimentConfig, OUTPUT_ROOT_ENV};
use crate::error::{Error, Result};
use crate::pipeline::{Outcome, Run, RunOptions, Stage};
use crate::stages;

#[derive(Debug, Parser)]
#[command(
    name = "physjoint",
    version,
    about = "Toy-scale joint RGB and perception video diffusion"
)]
pub struct Cli {
    /// Experiment config in TOML; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Folder that holds run directories.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    pub output_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Rerun even if the manifest says the stage is up to date.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Rerun even if the manifest says the stage is up to date.
    #[arg(long)]
    pub force: bool,
    /// Score records, one JSON object per line. Curates this file instead
    /// of the run's dataset.
    #[arg(long = "in", requires = "report")]
    pub input: Option<PathBuf>,
    /// Output path stem for the standalone report (`.json`, `.ndjson`,
    /// `.svg`, `.png`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Label threshold; overrides `curation.tau`.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Number of clips to draw; overrides `curation.n_out`.
    #[arg(long)]
    pub n_out: Option<usize>,
    /// Resampling seed; overrides `curation.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate scenes; write RGB frames, ground truth and score records.
    GenData(StageArgs),
    /// Render the perception video for every clip.
    EncodePercep(StageArgs),
    /// Filter and rebalance the clip pool and split off validation clips,
    /// or, with `--in`, curate a standalone score file.
    Curate(CurateArgs),
    /// Stage I: train the joint teacher.
    TrainTeacher(StageArgs),
    /// Stage II: distil the teacher into a single-stream student.
    Distill(StageArgs),
    /// Generate clips from the student.
    Sample(StageArgs),
    /// Validation losses and the toy physics proxy.
    Evaluate(StageArgs),
    /// Compare the rows of one ablation axis.
    Ablate {
        #[arg(long, value_parser = ["arch", "modality", "distill", "all"])]
        axis: String,
    },
    /// Every stage in order, skipping the ones already done.
    RunPipeline {
        /// Leave earlier stages untouched and start here.
        #[arg(long, value_parser = parse_stage)]
        skip_to: Option<Stage>,
        /// Rerun every stage that is not skipped.
        #[arg(long)]
        force: bool,
    },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
        format!("unknown stage {s:?}; expected one of {}", names.join(", "))
    })
}

pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let cfg = ExperimentConfig::default();
            cfg.validate()?;
            cfg
        }
    };
    if let Some(root) = &cli.output_root {
        cfg.output_root = root.clone();
    }
    Ok(cfg)
}

fn outcome(o: Outcome) -> &'static str {
    match o {
        Outcome::Ran => "done",
        Outcome::Skipped => "up to date, skipped",
        Outcome::Untouched => "left untouched",
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn print_row(r: &AblationRow) {
    match &r.error {
        Some(e) => println!("  {:<18} failed: {e}", r.row),
        None => println!(
            "  {:<18} val {}  penetration {}  stability {}  smoothness {}",
            r.row,
            fmt_opt(r.val_loss),
            fmt_opt(r.penetration_rate),
            fmt_opt(r.count_stability),
            fmt_opt(r.smoothness)
        ),
    }
}

fn print_table(t: &AblationTable, run: &Run) {
    let path = run.dir.join("ablate").join(t.axis.name());
    println!("{} ablation ({}): {}", t.axis, t.metric, path.display());
    if let Some(best) = &t.best {
        println!("  lowest {}: {best}", t.metric);
    }
}

fn warn_excluded(excluded: &[String]) {
    if !excluded.is_empty() {
        eprintln!(
            "warning: no clip carries {}; left out of the imbalance weights",
            excluded.join(", ")
        );
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    if let Command::Curate(a) = &cli.command {
        let c = &mut cfg.curation;
        c.tau = a.tau.unwrap_or(c.tau);
        c.n_out = a.n_out.or(c.n_out);
        c.seed = a.seed.unwrap_or(c.seed);
        cfg.validate()?;
        let c = &cfg.curation;
        if let (Some(input), Some(report)) = (&a.input, &a.report) {
            let r = stages::curate_file(input, c, report)?;
            warn_excluded(&r.excluded);
            println!(
                "curate: {} records, {} after quality, {} after reality, {} after richness, {} selected ({})",
                r.pool,
                r.after_quality,
                r.after_reality,
                r.after_richness,
                r.selected,
                report.display()
            );
            return Ok(());
        }
    }
    let run = Run::new(cfg)?;
    let stage = |s: Stage, a: &StageArgs| -> Result<()> {
        let o = run.run_stage(s, a.force)?;
        println!("{s}: {} ({})", outcome(o), run.stage_dir(s).display());
        Ok(())
    };
    match &cli.command {
        Command::GenData(a) => stage(Stage::GenData, a),
        Command::EncodePercep(a) => stage(Stage::EncodePercep, a),
        Command::Curate(a) => {
            stage(Stage::Curate, &StageArgs { force: a.force })?;
            let summary: stages::CurationSummary =
                crate::io::read_json(&run.stage_dir(Stage::Curate).join(stages::CURATED_FILE))?;
            warn_excluded(&summary.excluded);
            Ok(())
        }
        Command::TrainTeacher(a) => stage(Stage::TrainTeacher, a),
        Command::Distill(a) => stage(Stage::Distill, a),
        Command::Sample(a) => stage(Stage::Sample, a),
        Command::Evaluate(a) => stage(Stage::Evaluate, a),
        Command::Ablate { axis } => {
            let axes: Vec<Axis> = match axis.as_str() {
                "all" => Axis::ALL.to_vec(),
                s => {
                    vec![Axis::parse(s).ok_or_else(|| Error::Config(format!("unknown axis {s}")))?]
                }
            };
            for a in axes {
                println!("{a} ablation:");
                let t = ablate(&run, a, print_row)?;
                print_table(&t, &run);
            }
            Ok(())
        }
        Command::RunPipeline { skip_to, force } => {
            run.run_pipeline(
                RunOptions {
                    skip_to: *skip_to,
                    force: *force,
                },
                |s, o| println!("{s}: {}", outcome(o)),
            )?;
            println!("run directory: {}", run.dir.display());
            Ok(())
        }
    }
}
