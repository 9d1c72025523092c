//! `harmoseg`: staged phantom experiments from the command line.
//!
//! Exit codes: 0 on success, 1 when a stage fails, 2 for configuration
//! and usage errors.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use harmoseg::adapt::Strategy;
use harmoseg::experiment::{ExperimentConfig, Preset, Run, RUN_ROOT_ENV};
use harmoseg::Error;

#[derive(Parser, Debug)]
#[command(name = "harmoseg", version, about = "Lesion segmentation domain-adaptation experiments on synthetic phantoms")]
struct Cli {
    /// TOML or JSON experiment configuration (a complete file, see `config`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Folds fine-tuned concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Root directory for run directories.
    #[arg(long, global = true, env = RUN_ROOT_ENV)]
    run_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    OneShot,
    ZeroShot,
    HarmonizationEnriched,
    TargetCv,
    NoAdapt,
    /// The configured strategy list.
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved configuration (TOML unless --json).
    Config {
        #[arg(long)]
        json: bool,
    },
    /// Generate source, held-out and target phantom cohorts.
    Phantom,
    /// Skull-strip and white-matter normalize every cohort.
    Preprocess,
    /// Fit the harmonizer and map the source cohort to the target contrast.
    Harmonize,
    /// Train the network on the source cohort.
    Pretrain,
    /// Fine-tune the pretrained network under adaptation strategies.
    Adapt {
        #[arg(long, value_enum, default_value_t = StrategyArg::All)]
        strategy: StrategyArg,
    },
    /// Held-out source vs target accuracy of the pretrained network.
    Evaluate,
    /// Curve images and CSV tables from the adaptation results.
    Report,
    /// Every stage in order.
    Run,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::preset(match cli.preset {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        }),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(r) = &cli.run_root {
        cfg.run_root = Some(r.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn strategies(arg: StrategyArg, cfg: &ExperimentConfig) -> Vec<Strategy> {
    match arg {
        StrategyArg::All => cfg.strategies.clone(),
        StrategyArg::OneShot => vec![Strategy::OneShot],
        StrategyArg::ZeroShot => vec![Strategy::ZeroShot],
        StrategyArg::HarmonizationEnriched => vec![Strategy::HarmonizationEnriched],
        StrategyArg::TargetCv => vec![Strategy::TargetCv],
        StrategyArg::NoAdapt => vec![Strategy::NoAdapt],
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = resolve(cli)?;
    if let Command::Config { json } = cli.command {
        if json {
            println!("{}", cfg.to_json());
        } else {
            print!("{}", cfg.to_toml()?);
        }
        return Ok(());
    }
    let run = Run::open(cfg)?;
    let mut err = std::io::stderr();
    let say = |msg: String| println!("{msg}");
    let stages: Vec<&Command> = match &cli.command {
        Command::Run => vec![
            &Command::Phantom,
            &Command::Preprocess,
            &Command::Harmonize,
            &Command::Pretrain,
            &Command::Evaluate,
            &Command::Adapt { strategy: StrategyArg::All },
            &Command::Report,
        ],
        c => vec![c],
    };
    for stage in stages {
        match stage {
            Command::Phantom => {
                let m = run.stage_phantom()?;
                say(format!("wrote {} subjects to {}", m.entries.len(), run.path("data/raw").display()));
            }
            Command::Preprocess => {
                let m = run.stage_preprocess()?;
                say(format!("preprocessed {} subjects", m.entries.len()));
            }
            Command::Harmonize => {
                let m = run.stage_harmonize()?;
                say(format!("harmonized {} source subjects ({})", m.entries.len(), run.harmonizer()?.name()));
            }
            Command::Pretrain => {
                let r = run.stage_pretrain()?;
                say(format!("pretrained {} epochs, best epoch {}", r.logs.len(), r.best_epoch));
            }
            Command::Adapt { strategy } => {
                let list = strategies(*strategy, &run.config);
                for r in run.stage_adapt(&list, Some(&mut err))? {
                    if let Some(b) = r.best_epoch() {
                        say(format!("{}: best epoch {} mean DSC {:.4} L-F1 {:.4}", r.label, b.epoch, b.mean_dsc, b.mean_f1));
                    }
                }
            }
            Command::Evaluate => {
                let g = run.stage_evaluate()?;
                say(format!(
                    "held-out source DSC {:.4}, target DSC {:.4}, gap {:.4}",
                    g.heldout.mean_dsc(),
                    g.target.mean_dsc(),
                    g.dsc_gap()
                ));
            }
            Command::Report => {
                for p in run.stage_report()? {
                    say(format!("wrote {}", p.display()));
                }
            }
            Command::Config { .. } | Command::Run => unreachable!("handled above"),
        }
    }
    let _ = err.flush();
    println!("run directory: {}", run.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
