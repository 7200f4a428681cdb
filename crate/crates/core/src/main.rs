use clap::Parser;

fn main() {
    let cli = motorcal::cli::Cli::parse();
    std::process::exit(motorcal::cli::run(cli));
}
