use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use raad::pipeline::{Pipeline, PipelineConfig, Stage, CONFIG_SCHEMA};

#[derive(Parser, Debug)]
#[command(name = "raad", version, about = "Teacher-student anomaly detection with mixed-precision quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Stage for `eval` and `heatmaps`; all three when omitted.
    #[arg(long, global = true)]
    stage: Option<Stage>,

    /// Worker threads for evaluation.
    #[arg(long, env = "RAAD_THREADS", default_value_t = 1, global = true)]
    threads: usize,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Render the synthetic dataset.
    GenData,
    /// Distill the frozen extractor into the teacher.
    Pretrain,
    /// Jointly train the student and autoencoder.
    Train,
    /// Score layers and assign bit widths.
    ScoreLayers,
    /// Quantize the trained networks.
    Quantize,
    /// Fine-tune against the quantized teacher.
    Finetune,
    /// Compute detection and localization metrics.
    Eval,
    /// Export heatmaps and overlays.
    Heatmaps,
    /// Run every command in order.
    Run,
    /// Print the configuration JSON schema.
    Schema,
    /// Print the effective configuration.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => bail!("--config <path> is required for this command"),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.command == Command::Schema {
        print!("{CONFIG_SCHEMA}");
        return Ok(());
    }
    if cli.threads == 0 {
        bail!("RAAD_THREADS / --threads must be at least 1");
    }
    let cfg = load_config(&cli)?;
    if cli.command == Command::ShowConfig {
        println!("{}", cfg.to_json());
        eprintln!("config_hash: {}", cfg.hash());
        return Ok(());
    }
    let p = Pipeline::new(cfg)?.with_threads(cli.threads);
    match cli.command {
        Command::GenData => print_paths(&p.gen_data()?),
        Command::Pretrain => print_paths(&p.pretrain()?),
        Command::Train => print_paths(&p.train()?),
        Command::ScoreLayers => print_paths(&p.score_layers()?),
        Command::Quantize => print_paths(&p.quantize()?),
        Command::Finetune => print_paths(&p.finetune()?),
        Command::Eval => {
            let (reports, path) = p.eval(cli.stage)?;
            println!("{}", raad::metrics::EvalReport::HEADER);
            for r in reports {
                println!("{r}");
            }
            eprintln!("wrote {}", path.display());
        }
        Command::Heatmaps => print_paths(&p.heatmaps(cli.stage)?),
        Command::Run => {
            println!("{}", raad::metrics::EvalReport::HEADER);
            for r in p.run_all()? {
                println!("{r}");
            }
        }
        Command::Schema | Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
