use clap::Parser;

fn main() {
    let cli = stwp_cli::Cli::parse();
    if let Err(e) = stwp_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
