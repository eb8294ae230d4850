use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crowdgroup::pipeline::{self, RunConfig};
use crowdgroup::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "crowdgroup", version, about = "Social group detection in crowd clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed; derives the init, stage-1 and stage-2 seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Start stage 2 from a random embedding network.
    #[arg(long, global = true)]
    no_pretrain: bool,
    /// Keep the embedding network fixed during stage 2.
    #[arg(long, global = true)]
    freeze_phi: bool,
    /// Fraction of training clips whose labels stage 2 may use.
    #[arg(long, global = true)]
    label_fraction: Option<f64>,
    /// Stage-1 checkpoint for `train 2`.
    #[arg(long, global = true)]
    init: Option<PathBuf>,
    /// Stage-2 checkpoint for `eval`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Override the stage-1 epoch count.
    #[arg(long, global = true)]
    stage1_epochs: Option<usize>,
    /// Override the stage-2 epoch count.
    #[arg(long, global = true)]
    stage2_epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic benchmark as native clip files.
    Synth,
    /// Train stage 1 (pretext) or stage 2 (group relations).
    Train {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Evaluate a stage-2 checkpoint against the distance baseline.
    Eval,
    /// Evaluate the distance baseline alone.
    Baseline,
    /// Run the variant by label-fraction grid.
    Ablate,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.seeded(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if common.no_pretrain {
        cfg.no_pretrain = true;
    }
    if common.freeze_phi {
        cfg.stage2.fine_tune_phi = false;
    }
    if let Some(f) = common.label_fraction {
        cfg.stage2.label_fraction = f;
    }
    if let Some(p) = &common.init {
        cfg.init_checkpoint = Some(p.clone());
    }
    if let Some(p) = &common.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    if let Some(e) = common.stage1_epochs {
        cfg.stage1.epochs = e;
    }
    if let Some(e) = common.stage2_epochs {
        cfg.stage2.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Synth => {
            for path in pipeline::cmd_synth(&cfg)? {
                println!("{}", path.display());
            }
        }
        Command::Train { stage } => println!("{}", pipeline::cmd_train(&cfg, stage)?.display()),
        Command::Eval => println!("{}", pipeline::cmd_eval(&cfg)?.display()),
        Command::Baseline => println!("{}", pipeline::cmd_baseline(&cfg)?.display()),
        Command::Ablate => {
            let out = pipeline::cmd_ablate(&cfg, |cell| {
                eprintln!(
                    "cell variant={} fraction={} seed={} f1={:.4}",
                    cell.variant.name(),
                    cell.fraction,
                    cell.seed,
                    cell.summary.f1
                );
            })?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn one_line(e: &Error) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), one_line(&e));
            ExitCode::FAILURE
        }
    }
}
