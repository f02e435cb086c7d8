use clap::Parser;

fn main() {
    let cli = emofuse::cli::Cli::parse();
    if let Err(e) = emofuse::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
