use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use promptkd::config::ExperimentConfig;
use promptkd::pipeline::Run;
use promptkd::report::{aggregate, write_report};
use promptkd_core::distill::Method;

#[derive(Parser)]
#[command(name = "promptkd", version, about = "Prompt-tuned knowledge distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (overrides `run.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default `<out root>/seed-<seed>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-run stages that already completed.
    #[arg(long)]
    force: bool,
    /// Config override, e.g. `--set distill.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn open(&self) -> Result<Run> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("run.seed={s}"));
        }
        let cfg = ExperimentConfig::load(self.config.as_deref(), &overrides)?;
        Run::open(cfg, self.out.clone(), self.force)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Supervised training of the teacher.
    TrainTeacher(Common),
    /// Student warm start followed by one distillation method.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Method,
    },
    /// Sampled ROUGE-L of a method's best checkpoint (or `teacher`).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "promptkd")]
        method: String,
    },
    /// ExAccErr against generation steps and training progress.
    ExposureBias {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Method,
    },
    /// Teacher-forced KL from the teacher with and without the prompt.
    Probe(Common),
    /// Aggregates run directories into comparison tables.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::TrainTeacher(c) => {
            c.open()?.train_teacher(c.force)?;
        }
        Command::Distill { common, method } => {
            common.open()?.distill(method, common.force)?;
        }
        Command::Eval { common, method } => {
            common.open()?.evaluate(&method, common.force)?;
        }
        Command::ExposureBias { common, method } => {
            common.open()?.exposure_bias(method, common.force)?;
        }
        Command::Probe(c) => {
            c.open()?.probe(c.force)?;
        }
        Command::Report { runs, out } => {
            let report = aggregate(&runs)?;
            for f in write_report(&report, &out)? {
                println!("{}", out.join(f).display());
            }
        }
    }
    Ok(())
}
