use std::process;

use clap::error::ErrorKind;
use clap::Parser;
use tempcnn_cli::{exit_code, run, Cli, ExitCode};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::Ok,
                _ => ExitCode::Usage,
            };
            process::exit(code as i32);
        }
    };
    match run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e:#}");
            process::exit(exit_code(&e) as i32);
        }
    }
}
