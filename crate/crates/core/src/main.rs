use clap::Parser;

fn main() {
    let cli = mvdepth::cli::Cli::parse();
    if let Err(e) = mvdepth::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
