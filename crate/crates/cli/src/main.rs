mod cli;
mod commands;
mod error;
mod report;

use std::process::ExitCode;

use clap::error::ErrorKind;

use crate::error::CliError;

fn run() -> Result<(), CliError> {
    let matches = match cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            std::process::exit(code);
        }
    };
    let (args, overrides) = cli::parse(&matches).unwrap_or_else(|e| {
        let _ = e.print();
        std::process::exit(2)
    });

    let level = if args.verbose {
        log::LevelFilter::Debug
    } else if args.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failed(format!("thread pool: {e}")))?;
    }

    let cfg = cli::resolve_config(args.config.as_deref(), &overrides)?;
    cfg.validate().map_err(CliError::from_config)?;
    log::debug!("resolved configuration: {}", cfg.to_json());
    commands::run(&args.command, &cfg, args.out.as_deref())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
