use clap::Parser;

fn main() {
    let cli = fpca_cli::Cli::parse();
    if let Err(err) = fpca_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
