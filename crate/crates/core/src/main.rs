use clap::Parser;
use seqbattnet::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error[{}]: {e}", e.code());
        std::process::exit(1);
    }
}
