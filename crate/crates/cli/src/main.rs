use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sugar_cli::{cmd_ablate, cmd_data, cmd_eval, cmd_sample, cmd_train, CliError, RunConfig};

/// Subject-driven video customization at toy scale.
#[derive(Parser)]
#[command(name = "sugar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config JSON. Omitted fields take their defaults and are echoed.
    #[arg(long)]
    config: PathBuf,
    /// Output root; each command writes into its own subdirectory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build the triplet dataset with the generate-and-filter pipeline.
    Data(Common),
    /// Train with the configured strategy on the dataset.
    Train(Common),
    /// Sample probe clips from a checkpoint.
    Sample(Common),
    /// Score sampled clips.
    Eval(Common),
    /// Run the configured sweep and write one summary row per cell.
    Ablate(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (Command::Data(c) | Command::Train(c) | Command::Sample(c) | Command::Eval(c) | Command::Ablate(c)) =
        &cli.command;
    let cfg = RunConfig::load(&c.config)?;
    println!("{}", cfg.to_json());
    let out = c.out.as_path();
    match &cli.command {
        Command::Data(_) => {
            let r = cmd_data(&cfg, out)?;
            eprintln!(
                "generated {} accepted {} rejected identity {} text {} consistency {} static {}",
                r.generated,
                r.accepted,
                r.rejected_identity,
                r.rejected_text,
                r.rejected_consistency,
                r.rejected_static
            );
        }
        Command::Train(_) => {
            let o = cmd_train(&cfg, out)?;
            let last = o.log.last().map_or(f64::NAN, |r| r.loss);
            eprintln!(
                "trained {} steps, final loss {last:.4}, real reads {} synthetic reads {}",
                o.log.len(),
                o.real_reads,
                o.synth_reads
            );
        }
        Command::Sample(_) => {
            let rows = cmd_sample(&cfg, out)?;
            eprintln!("wrote {} samples", rows.len());
        }
        Command::Eval(_) => {
            let s = cmd_eval(&cfg, out)?;
            eprintln!("{}", serde_json::Value::Object(s.table));
        }
        Command::Ablate(_) => {
            for r in cmd_ablate(&cfg, out)? {
                eprintln!(
                    "cell {:3} design {} {:?} {:?} drop {:?} wT {} wI {}: identity {:.3} text {:.3} dynamic {:.3}",
                    r.cell,
                    r.design,
                    r.strategy,
                    r.data,
                    r.drop,
                    r.omega_t,
                    r.omega_i,
                    r.metrics.identity_score,
                    r.metrics.text_alignment,
                    r.metrics.dynamic_degree
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
