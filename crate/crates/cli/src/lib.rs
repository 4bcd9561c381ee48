//! Command-line front end for `omni-align`.
//!
//! Exit status: 0 on success, 1 when a check fails or on other errors,
//! 2 for invalid configuration, 3 for numerical failures.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Layout, Outcome};
use config::ConfigError;

#[derive(Debug, Parser)]
#[command(
    name = "omni-align",
    version,
    about = "Train and evaluate omni-modal alignment on a synthetic world"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration file; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides `seed` in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `dotted.key=value` override, value parsed as JSON when possible.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset.
    Gen,
    /// Train and write the checkpoint and step log.
    Train,
    /// Score the checkpoint on the eval split.
    Eval,
    /// PCA overlap and covariance-difference heatmaps.
    Diagnose,
    /// Compare analytic gradients with finite differences.
    Gradcheck,
    /// Full recipe against each single-component removal.
    Ablate,
    /// Grid search on a held-out validation split.
    Sweep,
}

/// Status for an error: 2 for configuration, 3 for numerical failures, else 1.
pub fn exit_status(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<omni_align::Error>() {
            return if e.is_numerical() { 3 } else { 1 };
        }
    }
    1
}

pub fn execute(cli: &Cli) -> anyhow::Result<Outcome> {
    let cfg = config::resolve(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let layout = Layout::new(&cli.out);
    match cli.command {
        Command::Gen => commands::gen(&cfg, &layout),
        Command::Train => commands::train_cmd(&cfg, &layout),
        Command::Eval => commands::eval_cmd(&cfg, &layout),
        Command::Diagnose => commands::diagnose(&cfg, &layout),
        Command::Gradcheck => commands::gradcheck(&cfg, &layout),
        Command::Ablate => commands::ablate(&cfg, &layout),
        Command::Sweep => commands::sweep(&cfg, &layout),
    }
}

pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            for path in &outcome.written {
                println!("wrote {}", path.display());
            }
            ExitCode::from(outcome.status)
        }
        Err(e) => {
            let status = exit_status(&e);
            let kind = match status {
                2 => "config error",
                3 => "numerical error",
                _ => "error",
            };
            eprintln!("{kind}: {e:#}");
            ExitCode::from(status)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statuses_follow_the_error_kind() {
        let cfg: anyhow::Error = ConfigError("bad".into()).into();
        assert_eq!(exit_status(&cfg), 2);
        let num: anyhow::Error = omni_align::Error::Numerical("nan".into()).into();
        assert_eq!(exit_status(&num.context("training")), 3);
        let other: anyhow::Error = omni_align::Error::Io("gone".into()).into();
        assert_eq!(exit_status(&other), 1);
        assert_eq!(exit_status(&anyhow::anyhow!("plain")), 1);
    }

    #[test]
    fn global_flags_parse_after_the_command() {
        let cli = Cli::try_parse_from([
            "omni-align",
            "train",
            "--seed",
            "7",
            "--set",
            "a=1",
            "--set",
            "b=2",
        ])
        .unwrap();
        assert_eq!(cli.command, Command::Train);
        assert_eq!(cli.seed, Some(7));
        assert_eq!(cli.overrides, ["a=1", "b=2"]);
    }
}
