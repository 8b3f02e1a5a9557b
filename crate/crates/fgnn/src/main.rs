use clap::Parser;

fn main() {
    let cli = fgnn::cli::Cli::parse();
    if let Err(error) = fgnn::cli::run(cli) {
        eprintln!("error: {error}");
        std::process::exit(error.exit_code());
    }
}
