use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use automaton_lab::harness::{
    self, load_experiment, load_theory, run_experiment, run_sweep, run_theory, write_sweep, write_trace,
    ExperimentConfig, HarnessError, TheoryCommand,
};

#[derive(Parser)]
#[command(name = "automaton-lab", version, about = "RNN automaton extraction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; presets fill in anything it leaves out
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.init_gain=0.5`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Shorthand for `--set preset=NAME`
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train with automaton snapshots and validation curves
    Train(Common),
    /// Grid over initial gain and training length
    Sweep(Common),
    /// Train with full pairwise distance tracking
    Pairs(Common),
    /// Train an architecture variant (tanh, step_relu, random task)
    Variant(Common),
    /// Integrate and check the interaction models
    Theory {
        /// ode3, ode9, fixed-points, merger-check or oracle3
        #[arg(value_parser = |s: &str| s.parse::<TheoryCommand>())]
        which: TheoryCommand,
        #[command(flatten)]
        common: Common,
        #[arg(long = "A-low", visible_alias = "a-low", allow_hyphen_values = true)]
        a_low: Option<f64>,
        #[arg(long = "A-high", visible_alias = "a-high", allow_hyphen_values = true)]
        a_high: Option<f64>,
    },
}

fn overrides(common: &Common) -> Vec<String> {
    let mut sets = Vec::new();
    if let Some(p) = &common.preset {
        sets.push(format!("preset={}", serde_json::Value::String(p.clone())));
    }
    sets.extend(common.overrides.iter().cloned());
    sets
}

fn experiment(common: &Common, default_preset: &str) -> Result<ExperimentConfig, HarnessError> {
    let mut config = load_experiment(common.config.as_deref(), &overrides(common), default_preset)?;
    config.output_dir = Some(common.out.clone());
    Ok(config)
}

fn train_like(config: ExperimentConfig) -> Result<(), HarnessError> {
    let out = config.output_dir.clone().expect("set from --out");
    let trace = run_experiment(&config)?;
    write_trace(&trace, &config, &out)?;
    let s = trace.summary(&config);
    println!(
        "epochs {} final_loss {:e} states {} minimized {} accuracy_100 {} equivalent {}",
        s.epochs_run, s.final_loss, s.states, s.minimized_states, s.accuracy, s.equivalent
    );
    match trace.failure {
        Some(reason) => Err(HarnessError::Failed(reason)),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train(c) => train_like(experiment(&c, "parity")?),
        Command::Variant(c) => train_like(experiment(&c, "tanh")?),
        Command::Pairs(c) => {
            let mut config = experiment(&c, "parity")?;
            config.pairs.enabled = true;
            config.validate()?;
            train_like(config)
        }
        Command::Sweep(c) => {
            let config = experiment(&c, "parity")?;
            let rows = run_sweep(&config, harness::worker_count()?)?;
            write_sweep(&rows, &config, &c.out)?;
            let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
            println!("cells {} failed {failed}", rows.len());
            Ok(())
        }
        Command::Theory {
            which,
            common,
            a_low,
            a_high,
        } => {
            let mut sets = overrides(&common);
            if let Some(v) = a_low {
                sets.push(format!("merger.a_low={v}"));
            }
            if let Some(v) = a_high {
                sets.push(format!("merger.a_high={v}"));
            }
            let config = load_theory(common.config.as_deref(), &sets)?;
            print!("{}", run_theory(which, &config, &common.out)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
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
