use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use apl_lab::config::RunConfig;
use apl_lab::pipeline::Lab;
use apl_lab::sweep::Axis;
use apl_lab::LabError;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "apl-lab", about = "Anonymization prompt learning on a synthetic identity world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    GenWorld,
    TrainBase,
    TrainRecognizer,
    TrainApl,
    Eval {
        /// Prompt checkpoint to compare against the plain model.
        #[arg(long)]
        prompt: Option<PathBuf>,
    },
    Transfer,
    Personalize,
    Sweep {
        /// iterations, alpha, prompt-length, dataset-size or no-reg
        #[arg(long)]
        axis: String,
    },
    /// Runs the configured stages in order, reusing verified outputs.
    All,
    /// Prints the resolved configuration.
    ShowConfig,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Cmd::ShowConfig = cli.cmd {
        print!("{}", cfg.resolved());
        return Ok(());
    }
    let lab = Lab::new(cfg, cli.out)?;
    match cli.cmd {
        Cmd::GenWorld => {
            lab.gen_world()?;
        }
        Cmd::TrainBase => {
            lab.train_base()?;
        }
        Cmd::TrainRecognizer => {
            lab.train_recognizer()?;
        }
        Cmd::TrainApl => {
            lab.train_apl()?;
        }
        Cmd::Eval { prompt } => {
            let out = lab.eval(prompt.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Cmd::Transfer => println!("{}", serde_json::to_string_pretty(&lab.transfer()?)?),
        Cmd::Personalize => println!("{}", serde_json::to_string_pretty(&lab.personalize()?)?),
        Cmd::Sweep { axis } => {
            let axis: Axis = axis.parse()?;
            print!("{}", lab.sweep(axis)?.to_csv());
        }
        Cmd::All => {
            for stage in lab.cfg.stages.clone() {
                log::info!("stage {stage}");
                match stage.as_str() {
                    "gen-world" => drop(lab.ensure("world")?),
                    "train-base" => drop(lab.ensure("base")?),
                    "train-recognizer" => drop(lab.ensure("recognizer")?),
                    "train-apl" => drop(lab.ensure("apl")?),
                    "eval" => {
                        let prompt = lab.dir("apl").join("prompt.aplp");
                        lab.eval(None)?;
                        lab.eval(Some(&prompt))?;
                    }
                    "transfer" => drop(lab.transfer()?),
                    "personalize" => drop(lab.personalize()?),
                    other => anyhow::bail!(LabError::Config(format!("unknown stage {other}"))),
                }
            }
        }
        Cmd::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli).context("apl-lab failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<LabError>()).map_or(1, LabError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
