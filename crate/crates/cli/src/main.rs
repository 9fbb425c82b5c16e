use clap::Parser;

use segrisk_cli::args::Cli;

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    if let Err(e) = segrisk_cli::run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(segrisk_cli::exit_code(&e));
    }
}
