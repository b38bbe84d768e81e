use clap::Parser;

fn main() {
    let cli = rocksr_cli::Cli::parse();
    if let Err(e) = rocksr_cli::run_cli(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
