use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mbn_cli::{cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_train, parse_fault, CliError, ExperimentConfig, Overrides};
use mbn_core::gradcheck::GradcheckConfig;
use mbn_core::trainer::Mode;

#[derive(Parser)]
#[command(name = "mbn", version, about = "Meta-learned adaptive margins: data, training, fairness evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/meta/test splits into the output directory.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write trace.csv and model.txt.
    Train {
        #[command(flatten)]
        common: Common,
        /// mbn-arc, mbn-cos, mbn-soft, arcface, cosface or softmax; overrides the config.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Evaluate a model on the test split and write report.json and roc.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model file; defaults to model.txt in the output directory.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Finite-difference checks of every derivative the trainer relies on.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Randomized instances per first-order and mixed-second check.
        #[arg(long, default_value_t = GradcheckConfig::default().instances)]
        instances: usize,
        /// Random states per meta-gradient check.
        #[arg(long, default_value_t = GradcheckConfig::default().meta_states)]
        meta_states: usize,
        /// Scale one check's analytic derivative, e.g. `first-order/exp=1.001`.
        #[arg(long)]
        fault: Option<String>,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| {
        let all: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode `{s}` (expected one of {})", all.join(", "))
    })
}

fn load(common: &Common, mode: Option<Mode>) -> Result<ExperimentConfig, CliError> {
    let overrides = Overrides { seed: common.seed, mode, out_dir: common.out.clone() };
    ExperimentConfig::load(&common.config, &overrides)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common } => {
            let config = load(&common, None)?;
            println!("{}", cmd_gen_data(&config)?);
        }
        Command::Train { common, mode } => {
            let config = load(&common, mode)?;
            let out = cmd_train(&config)?;
            let last = out.trace.last().expect("at least one iteration");
            let margins: Vec<String> = last.margins.iter().map(|m| format!("{m:.4}")).collect();
            println!(
                "{} {}: {} iterations, final loss {:.4}, margins [{}]",
                config.label,
                config.trainer.mode,
                out.trace.len(),
                last.train_loss,
                margins.join(", ")
            );
        }
        Command::Eval { common, model } => {
            let config = load(&common, None)?;
            let report = cmd_eval(&config, model.as_deref())?;
            println!("{}", report.summary_line());
        }
        Command::Gradcheck { seed, instances, meta_states, fault } => {
            let config = GradcheckConfig { seed, instances, meta_states, ..GradcheckConfig::default() };
            let fault = fault.as_deref().map(parse_fault).transpose()?;
            let report = cmd_gradcheck(&config, fault.as_ref())?;
            print!("{}", report.table());
            if !report.passed() {
                let failed: Vec<&str> = report.rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
                return Err(CliError::CheckFailed(format!("failed checks: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
