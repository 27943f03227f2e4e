use clap::Parser;
use coto_cli::cli::Cli;

fn main() {
    let cli = Cli::parse();
    let result = coto_cli::init_threads().and_then(|_| coto_cli::run(&cli));
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
