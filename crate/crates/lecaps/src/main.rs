use clap::Parser;

fn main() {
    let cli = lecaps::cli::Cli::parse();
    if let Err(e) = lecaps::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
