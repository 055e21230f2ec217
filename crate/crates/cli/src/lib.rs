//! `forkscope` command line: forking-token detection runs, reports,
//! evaluation and the rationale pipeline.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 backend failure.

mod args;
mod commands;
mod error;
mod jsonl;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::Parser;

pub use args::{Cli, Command, Global};
pub use error::CliError;
pub use manifest::{RunManifest, MANIFEST_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;

/// What a finished command reports back for the manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub config: serde_json::Value,
    pub endpoint: Option<String>,
    /// Non-zero when the command completed but some work failed on the backend.
    pub exit_code: i32,
}

fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Parses `argv` (program name first), runs the command, writes the run
/// manifest and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INVALID,
            };
        }
    };
    init_tracing();

    let started = chrono::Utc::now();
    let out_dir = cli.global.out.clone().unwrap_or_else(|| manifest::default_run_dir(cli.command.name(), started));
    let result = std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::invalid(anyhow::anyhow!("cannot create output directory {}: {e}", out_dir.display())))
        .and_then(|()| commands::dispatch(&cli, &out_dir));
    let finished = chrono::Utc::now();

    let (code, outcome, error) = match result {
        Ok(outcome) => (outcome.exit_code, outcome, None),
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            (e.code, Outcome::default(), Some(format!("{:#}", e.error)))
        }
    };
    let manifest = RunManifest::new(&cli, &argv, &outcome, code, error, started, finished);
    if let Err(e) = manifest.write(&out_dir) {
        eprintln!("error: cannot write run manifest: {e}");
        return code.max(EXIT_INVALID);
    }
    tracing::info!(command = cli.command.name(), exit_code = code, dir = %out_dir.display(), "run finished");
    code
}
