use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use retinakit::harness::{self, Command, HarnessError};

#[derive(Parser)]
#[command(
    name = "retinakit",
    version,
    about = "Fundus lesion segmentation, grading and transfer experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Override a config key, e.g. `--set seg.train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory; defaults to `<output-root>/<name>`.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long, env = "RETINAKIT_OUTPUT", default_value = "runs")]
    output_root: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint to evaluate (else the config's `checkpoint` key).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom dataset.
    Synth(RunArgs),
    /// Lesion and grade statistics of a dataset.
    Stats(RunArgs),
    TrainSeg(RunArgs),
    EvalSeg(EvalArgs),
    TrainGrade(RunArgs),
    EvalGrade(EvalArgs),
    /// Pretrain, then train and evaluate each ablation rung.
    TrainTransfer(RunArgs),
    EvalTransfer(EvalArgs),
    /// Compare finished runs side by side.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Run a config's task, or re-run a manifest.
    Run(RunArgs),
}

fn run_dir(args: &RunArgs, cfg: &harness::ExperimentConfig) -> PathBuf {
    args.output
        .clone()
        .unwrap_or_else(|| args.output_root.join(harness::run_name(cfg)))
}

fn load(args: &RunArgs) -> Result<harness::LoadedConfig, HarnessError> {
    let is_manifest = args.config.extension().is_some_and(|e| e == "json");
    if is_manifest {
        let m = harness::Manifest::read(&args.config)?;
        if !args.overrides.is_empty() {
            return Err(HarnessError::Config("--set cannot be combined with a manifest".into()));
        }
        harness::load_config_text(&m.config)
    } else {
        harness::load_config(&args.config, &args.overrides)
    }
}

fn execute(cmd: Option<Command>, args: &RunArgs, checkpoint: Option<&Path>) -> Result<PathBuf, HarnessError> {
    let loaded = load(args)?;
    let cmd = cmd.unwrap_or_else(|| Command::for_task(loaded.config.task));
    let dir = run_dir(args, &loaded.config);
    harness::execute(cmd, &loaded, &dir, checkpoint)?;
    Ok(dir)
}

fn dispatch(cli: Cli) -> Result<PathBuf, HarnessError> {
    match cli.command {
        Cmd::Synth(a) => execute(Some(Command::Synth), &a, None),
        Cmd::Stats(a) => execute(Some(Command::Stats), &a, None),
        Cmd::TrainSeg(a) => execute(Some(Command::TrainSeg), &a, None),
        Cmd::EvalSeg(a) => execute(Some(Command::EvalSeg), &a.run, a.checkpoint.as_deref()),
        Cmd::TrainGrade(a) => execute(Some(Command::TrainGrade), &a, None),
        Cmd::EvalGrade(a) => execute(Some(Command::EvalGrade), &a.run, a.checkpoint.as_deref()),
        Cmd::TrainTransfer(a) => execute(Some(Command::TrainTransfer), &a, None),
        Cmd::EvalTransfer(a) => execute(Some(Command::EvalTransfer), &a.run, a.checkpoint.as_deref()),
        Cmd::Report { runs, output } => harness::compare_runs(&runs, &output).map(|_| output),
        Cmd::Run(a) => execute(None, &a, None),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {:#}", anyhow::Error::new(e).context("run failed"));
            ExitCode::from(code as u8)
        }
    }
}
