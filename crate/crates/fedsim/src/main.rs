use clap::Parser;

fn main() {
    let cli = fedsim::cli::Cli::parse();
    std::process::exit(fedsim::cli::run(cli) as i32);
}
