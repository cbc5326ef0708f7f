//! Subcommand definitions and dispatch.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::PipelineConfig;
use crate::gradcheck;
use crate::pipeline::{score_files, Pipeline, Stage};
use crate::synth::{write_fixture, SynthConfig};

#[derive(Debug, Parser)]
#[command(
    name = "crrg",
    version,
    about = "Region-based report generation and contrastive radiograph classification"
)]
pub struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed and CRRG_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides paths.output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainStage {
    Detector,
    Selector,
    Generator,
    Clip,
    Classifier,
}

impl From<TrainStage> for Stage {
    fn from(s: TrainStage) -> Self {
        match s {
            TrainStage::Detector => Stage::Detector,
            TrainStage::Selector => Stage::Selector,
            TrainStage::Generator => Stage::Generator,
            TrainStage::Clip => Stage::Clip,
            TrainStage::Classifier => Stage::Classifier,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Join reports, images and scene graphs and extract FINDINGS.
    Ingest,
    /// Assign train/val/test splits.
    Split,
    /// Train one stage; earlier stages must have run.
    Train { stage: TrainStage },
    /// Every stage in order, optionally resuming from --stage.
    RunAll {
        #[arg(long)]
        stage: Option<Stage>,
    },
    /// Write reports for the configured split.
    Generate,
    /// Score generated reports against references.
    Score {
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        references: Option<PathBuf>,
    },
    /// Score the RSNA images with the trained classifier.
    Classify,
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
    /// Write the synthetic fixture corpus (mimic/ and rsna/) under --out.
    Synth {
        #[arg(long)]
        studies: Option<usize>,
        #[arg(long)]
        rsna_images: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli.config.as_ref().context("this command needs --config")?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.output = out.clone();
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gradcheck { points } => {
            let checks = gradcheck::run_all(*points, cli.seed.unwrap_or(0))?;
            let mut failed = 0;
            for c in &checks {
                let status = if c.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<16} points {:>3}  worst rel. error {:.2e}  redrawn near ReLU kinks {:>2}  {status}",
                    c.name, c.points, c.worst, c.redrawn
                );
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                bail!(
                    "{failed} gradient checks exceeded {:e}",
                    gradcheck::TOLERANCE
                );
            }
            Ok(())
        }
        Command::Synth {
            studies,
            rsna_images,
        } => {
            let root = cli.out.clone().context("synth needs --out")?;
            let mut cfg = SynthConfig::default();
            if let Some(n) = studies {
                cfg.studies = *n;
            }
            if let Some(n) = rsna_images {
                cfg.rsna_images = *n;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            write_fixture(&root, &cfg)?;
            println!("wrote fixture corpus to {}", root.display());
            Ok(())
        }
        Command::Score {
            generated,
            references,
        } if cli.config.is_none() => {
            let (Some(g), Some(r)) = (generated, references) else {
                bail!("score without --config needs --generated and --references");
            };
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&out)?;
            let report = score_files(g, r, &out.join("scores.csv"), &out.join("scores.json"))?;
            print!("{report}");
            Ok(())
        }
        command => {
            let pipeline = Pipeline::new(load_config(&cli)?);
            match command {
                Command::Ingest => pipeline.run(Stage::Ingest),
                Command::Split => pipeline.run(Stage::Split),
                Command::Train { stage } => pipeline.run((*stage).into()),
                Command::RunAll { stage } => pipeline.run_from(stage.unwrap_or(Stage::Ingest)),
                Command::Generate => pipeline.run(Stage::Generate),
                Command::Score {
                    generated,
                    references,
                } => {
                    let l = &pipeline.layout;
                    let g = generated.clone().unwrap_or_else(|| l.generated());
                    let r = references.clone().unwrap_or_else(|| l.references());
                    std::fs::create_dir_all(&l.root)?;
                    let report = score_files(&g, &r, &l.scores_csv(), &l.scores_json())?;
                    print!("{report}");
                    Ok(())
                }
                Command::Classify => pipeline.run(Stage::Classify),
                Command::Gradcheck { .. } | Command::Synth { .. } => unreachable!("handled above"),
            }
        }
    }
}
