mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{load_section, Cli, Command, Merge};

/// Exit 1: the request itself is invalid. Exit 2: reading or writing a file failed.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Io(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Io(m) => m,
        }
    }
}

impl From<cheapnvs::Error> for Failure {
    fn from(e: cheapnvs::Error) -> Self {
        // Unreadable or corrupt inputs are file problems, not bad requests.
        if e.is_io() || matches!(e, cheapnvs::Error::Format { .. }) {
            Failure::Io(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn with_config<A: Merge + serde::de::DeserializeOwned + Default>(mut a: A, cli: &Option<std::path::PathBuf>, section: &str) -> Result<A, Failure> {
    if let Some(path) = cli {
        a.merge(load_section(path, section)?);
    }
    Ok(a)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let section = cli.command.section();
    let cfg = &cli.config;
    match cli.command {
        Command::GenData(a) => commands::gen_data(with_config(a, cfg, section)?),
        Command::Train(a) => commands::train(with_config(a, cfg, section)?),
        Command::Infer(a) => commands::infer(with_config(a, cfg, section)?),
        Command::Eval(a) => commands::eval(with_config(a, cfg, section)?),
        Command::Bench(a) => commands::bench(with_config(a, cfg, section)?),
        Command::Ablate(a) => commands::ablate(with_config(a, cfg, section)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{}", one_line(first));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", one_line(f.message()));
            ExitCode::from(f.code())
        }
    }
}
