use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mfg_cli::{emit, output_dir, parse_config, run, Command, RunConfig, OUT_DIR_VAR};

/// Stationary ergodic mean-field game experiments.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    command: Command,
    /// TOML configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the environment and the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel solves.
    #[arg(long)]
    threads: Option<usize>,
}

fn load(path: Option<&PathBuf>) -> Result<RunConfig, String> {
    let Some(path) = path else { return parse_config("").map_err(|e| e.to_string()) };
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut config = match load(cli.config.as_ref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(c) = config.command {
        if c != cli.command {
            eprintln!("config error: configuration is for `{}` but `{}` was requested", c.name(), cli.command.name());
            return ExitCode::from(2);
        }
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    }
    let dir = output_dir(cli.out.as_deref(), std::env::var_os(OUT_DIR_VAR), &config);

    let bundle = run(&config, Some(cli.command));
    for a in &bundle.assertions {
        println!("{} {}: {:.6e} ({})", if a.passed { "PASS" } else { "FAIL" }, a.name, a.value, a.detail);
    }
    for f in &bundle.failures {
        eprintln!("solver failure in {}: {}", f.label, f.error);
    }
    println!("{} of {} assertions passed", bundle.passed(), bundle.assertions.len());
    if let Err(e) = emit(&bundle, &dir) {
        eprintln!("cannot write results to {}: {e}", dir.display());
        return ExitCode::from(1);
    }
    println!("results written to {}", dir.display());
    ExitCode::from(bundle.status().exit_code() as u8)
}
