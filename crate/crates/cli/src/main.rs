use clap::Parser;

fn main() {
    let cli = crrg_cli::commands::Cli::parse();
    if let Err(e) = crrg_cli::commands::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
