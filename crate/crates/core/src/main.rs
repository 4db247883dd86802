use clap::Parser;

use task_transfer::commands::{error_json, exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{}", error_json(&e));
        std::process::exit(exit_code(&e));
    }
}
