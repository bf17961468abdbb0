use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = sru2b::cli::Cli::parse();
    std::process::exit(sru2b::cli::run(cli));
}
