use std::process::ExitCode;

use clap::Parser;

use sdm_cli::{diagnostic, exit_code, run, Args};

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", diagnostic(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
