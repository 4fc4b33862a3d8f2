use clap::Parser;

fn main() {
    let cli = clld::cli::Cli::parse();
    std::process::exit(clld::cli::run(cli));
}
