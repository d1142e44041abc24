//! `vici`: run the imaging pipeline stage by stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vici_core::config::ExperimentConfig;
use vici_core::degrade::DegradationKind;
use vici_core::pipeline::{
    load_dataset, run_sweep, sweep_cells, write_sweep, Pipeline, Stage, StageOutcome,
};
use vici_core::Error;

const DEFAULT_DATA: &str = "data/mnist/train-images-idx3-ubyte";

#[derive(Parser, Debug)]
#[command(
    name = "vici",
    version,
    about = "Variational inference for computational imaging"
)]
struct Cli {
    /// JSON experiment config; the MNIST deblurring defaults when omitted.
    #[arg(long, global = true, env = "VICI_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rerun stages even when their outputs are up to date.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for HIO restarts and sweep cells.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Fourier tasks: measure the modulus instead of the squared modulus.
    #[arg(long, global = true)]
    fourier_modulus: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split the dataset and simulate paired and test measurements.
    Simulate,
    /// Train the multi-fidelity forward model on the paired set.
    TrainForward,
    /// Train the inverse model on unpaired targets through the forward model.
    TrainInverse,
    /// Train the configured baselines.
    TrainBaseline,
    /// Write reconstruction and posterior grids for test examples.
    Reconstruct,
    /// Score every method on the test set.
    Evaluate,
    /// Run every stage in order.
    Run,
    /// Train and score every cell of the config's sweep.
    Sweep,
    /// Print the effective config as JSON.
    PrintConfig,
}

fn config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::resolve(
        cli.config.as_deref(),
        DEFAULT_DATA.as_ref(),
        std::env::vars(),
    )?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if cli.fourier_modulus {
        if cfg.truth.kind != DegradationKind::FourierIntensity {
            return Err(Error::Config(
                "--fourier-modulus needs a Fourier task".into(),
            ));
        }
        cfg.truth.modulus = true;
        cfg.lowfid.modulus = true;
    }
    Ok(cfg)
}

fn report(done: &[(Stage, StageOutcome)]) {
    for (s, o) in done {
        let what = match o {
            StageOutcome::Ran => "done",
            StageOutcome::Skipped => "up to date",
        };
        println!("{:<15} {what}", s.name());
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = config(cli)?;
    let stage = match cli.command {
        Command::PrintConfig => {
            println!("{}", cfg.to_json());
            return Ok(());
        }
        Command::Sweep => {
            let data = load_dataset(&cfg)?;
            let cells = sweep_cells(&cfg)?;
            log::info!("running {} sweep cells", cells.len());
            let r = run_sweep(&cfg, &data, &cells, cli.threads)?;
            write_sweep(&cfg.out_dir, &r)?;
            print!("{}", r.to_table());
            return Ok(());
        }
        Command::Run => None,
        Command::Simulate => Some(Stage::Simulate),
        Command::TrainForward => Some(Stage::TrainForward),
        Command::TrainInverse => Some(Stage::TrainInverse),
        Command::TrainBaseline => Some(Stage::TrainBaseline),
        Command::Reconstruct => Some(Stage::Reconstruct),
        Command::Evaluate => Some(Stage::Evaluate),
    };
    let out = cfg.out_dir.clone();
    let p = Pipeline::new(cfg, cli.force, cli.threads)?;
    let done = match stage {
        Some(s) => p.run(s)?,
        None => p.run_all()?,
    };
    report(&done);
    if done.iter().any(|(s, _)| *s == Stage::Evaluate) {
        let table = out.join("report/report.txt");
        if let Ok(t) = std::fs::read_to_string(&table) {
            print!("{t}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Numerical { .. } => 3,
                _ => 1,
            })
        }
    }
}
