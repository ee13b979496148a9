use clap::Parser;
use partkit::cli::{error_json, exit_code, run, Cli};

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    if let Err(e) = run(cli.command, &argv) {
        eprintln!("{}", error_json(&e));
        std::process::exit(exit_code(&e));
    }
}
