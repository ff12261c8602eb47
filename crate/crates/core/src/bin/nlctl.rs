//! `nlctl` — batch front end for the nonlocal control experiments.
//!
//! Usage: `nlctl <kind> --config <path> [--out <dir>] [--seed <u64>]
//! [--threads <k>]` where kind is one of `check`, `solve-state`,
//! `solve-control`, `sweep-s`, `sweep-delta`, `poincare`,
//! `operator-probe`, or `validate` (report config violations and exit).
//!
//! Exit codes: 0 success, 2 validation failure, 3 solver failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use nonlocal_control::config::{load_config, validate, Kind};
use nonlocal_control::runner::run;
use nonlocal_control::Error;

#[derive(Parser)]
#[command(
    name = "nlctl",
    version,
    about = "Nonlocal-gradient optimal control experiments"
)]
struct Cli {
    /// Experiment kind, or `validate` to only check the config.
    kind: String,

    /// Path to the experiment config (TOML).
    #[arg(long)]
    config: PathBuf,

    /// Output directory (default: `output.dir` from the config, or `out`).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Seed override for randomized components.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker thread budget (recorded in the manifest; solves run serially).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let validate_only = cli.kind == "validate";
    let kind = if validate_only {
        // config may echo a concrete kind; validate against it, else use a
        // kind with no cross-field rules beyond the shared ones
        None
    } else {
        match cli.kind.parse::<Kind>() {
            Ok(k) => Some(k),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    };

    let cfg = match load_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };

    let effective_kind = match kind {
        Some(k) => k,
        None => cfg
            .kind
            .as_deref()
            .and_then(|k| k.parse::<Kind>().ok())
            .unwrap_or(Kind::Check),
    };

    let violations = validate(&cfg, effective_kind);
    if validate_only {
        if violations.is_empty() {
            println!("ok: no violations");
            return ExitCode::SUCCESS;
        }
        for v in &violations {
            println!("violation {v}");
        }
        return ExitCode::from(2);
    }
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("error: config violation — {v}");
        }
        return ExitCode::from(2);
    }

    let out_dir = cli
        .out
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let seed = cli.seed.unwrap_or(cfg.solver.seed);

    match run(effective_kind, &cfg, &out_dir, seed, cli.threads.max(1)) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Domain(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
