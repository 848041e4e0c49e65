use clap::Parser;

fn main() {
    let cli = udiffse::cli::Cli::parse();
    std::process::exit(udiffse::cli::run(cli));
}
