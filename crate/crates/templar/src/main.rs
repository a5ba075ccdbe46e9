use clap::Parser;

fn main() {
    let cli = templar::cli::Cli::parse();
    std::process::exit(templar::cli::run(cli));
}
